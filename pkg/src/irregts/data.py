"""Synthetic phenology-under-clouds data, its file format and transforms.

Each class follows a Gaussian bump per feature (a growth cycle with a
class-specific peak time, width and amplitude). A series samples its
class curve at integer times ``0..T-1``, loses each time step with
probability ``missing_rate`` (cloud cover) and gets Gaussian noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, EmptyInputError, ParseError, ValidationError
from ._files import atomic_write_text

FORMAT_VERSION = 1


@dataclass
class TimeSeries:
    id: str
    timestamps: List[int]
    observations: np.ndarray  # (n_obs, d)
    label: int
    horizon: int

    def __post_init__(self):
        self.timestamps = [int(t) for t in self.timestamps]
        self.observations = np.asarray(self.observations, dtype=np.float64)
        if self.observations.ndim == 1:
            self.observations = self.observations.reshape(len(self.timestamps), -1)

    @property
    def feature_dim(self) -> int:
        return self.observations.shape[1]

    def __len__(self):
        return len(self.timestamps)

    def validate(self, feature_dim: Optional[int] = None, num_classes: Optional[int] = None):
        ts = self.timestamps
        if len(ts) == 0:
            raise ValidationError(f"series {self.id}: no observations")
        if len(ts) != self.observations.shape[0]:
            raise ValidationError(f"series {self.id}: {len(ts)} timestamps but {self.observations.shape[0]} observations")
        if ts[0] < 0 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError(f"series {self.id}: timestamps must be nonnegative and strictly increasing")
        if self.horizon < ts[-1]:
            raise ValidationError(f"series {self.id}: horizon {self.horizon} before last timestamp {ts[-1]}")
        if feature_dim is not None and self.feature_dim != feature_dim:
            raise ValidationError(f"series {self.id}: feature dim {self.feature_dim} != {feature_dim}")
        if num_classes is not None and not 0 <= self.label < num_classes:
            raise ValidationError(f"series {self.id}: label {self.label} outside [0, {num_classes})")
        if not np.all(np.isfinite(self.observations)):
            raise ValidationError(f"series {self.id}: non-finite observation")

    def select(self, keep) -> "TimeSeries":
        """Keep the observations at the given positional indices (sorted)."""
        keep = np.sort(np.asarray(keep, dtype=int))
        return replace(
            self,
            timestamps=[self.timestamps[i] for i in keep],
            observations=self.observations[keep],
        )

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.id == other.id
            and self.timestamps == other.timestamps
            and self.label == other.label
            and self.horizon == other.horizon
            and self.observations.shape == other.observations.shape
            and np.array_equal(self.observations, other.observations)
        )


@dataclass
class Dataset:
    series: List[TimeSeries]
    num_classes: int
    feature_dim: int
    nominal_length: int
    missing_rate: float = 0.0

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.series], dtype=int)

    def validate(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        for s in self.series:
            s.validate(self.feature_dim, self.num_classes)

    def with_series(self, series) -> "Dataset":
        return replace(self, series=list(series))

    def empirical_missing_rate(self) -> float:
        total = len(self.series) * self.nominal_length
        return 1.0 - sum(len(s) for s in self.series) / total

    def channel_means(self) -> np.ndarray:
        return np.concatenate([s.observations for s in self.series]).mean(axis=0)


@dataclass
class ClassTemplate:
    peak: float
    width: float
    amplitude: np.ndarray  # (d,)

    def curve(self, t):
        t = np.asarray(t, dtype=np.float64)[:, None]
        return self.amplitude[None, :] * np.exp(-((t - self.peak) ** 2) / (2 * self.width ** 2))


@dataclass
class SynthSpec:
    num_classes: int = 4
    feature_dim: int = 6
    length: int = 40
    missing_rate: float = 0.5
    noise_std: float = 1.0
    n_series: int = 2500
    seed: int = 0
    templates: Optional[List[ClassTemplate]] = None

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.length < 2:
            raise ConfigError("length T must be >= 2")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError("missing_rate must lie in [0, 1)")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.n_series < 1:
            raise ConfigError("n_series must be >= 1")
        if self.templates is not None:
            if len(self.templates) != self.num_classes:
                raise ConfigError("one template per class is required")
            for tpl in self.templates:
                if np.shape(tpl.amplitude) != (self.feature_dim,) or tpl.width <= 0:
                    raise ConfigError("template amplitude must have feature_dim entries and width > 0")


def default_templates(spec: SynthSpec) -> List[ClassTemplate]:
    """Class curves that share a spectral signature and differ mainly in timing.

    Peaks are spread evenly over the middle of the season, so telling
    classes apart relies on *when* the bump happens more than on its size.
    """
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    T, K, d = spec.length, spec.num_classes, spec.feature_dim
    signature = rng.uniform(0.6, 1.4, size=d) * rng.choice([-1.0, 1.0], size=d)
    peaks = np.linspace(0.25 * T, 0.75 * T, K)
    order = rng.permutation(K)
    out = []
    for k in range(K):
        width = T * rng.uniform(0.08, 0.14)
        amp = signature * rng.uniform(0.85, 1.15, size=d)
        out.append(ClassTemplate(float(peaks[order[k]]), float(width), amp))
    return out


def generate(spec: SynthSpec) -> Dataset:
    spec.validate()
    templates = spec.templates or default_templates(spec)
    T = spec.length
    t_all = np.arange(T)
    curves = [tpl.curve(t_all) for tpl in templates]
    label_rng = np.random.default_rng([spec.seed, 0x1AB])
    labels = label_rng.permutation(np.arange(spec.n_series) % spec.num_classes)
    series = []
    for i in range(spec.n_series):
        rng = np.random.default_rng([spec.seed, i])
        k = int(labels[i])
        keep = rng.random(T) >= spec.missing_rate
        while not keep.any():
            keep = rng.random(T) >= spec.missing_rate
        ts = t_all[keep]
        obs = curves[k][keep] + spec.noise_std * rng.standard_normal((len(ts), spec.feature_dim))
        series.append(TimeSeries(f"s{i:06d}", ts.tolist(), obs, k, T - 1))
    return Dataset(series, spec.num_classes, spec.feature_dim, T, spec.missing_rate)


# -- JSONL ------------------------------------------------------------------

def _series_to_json(s: TimeSeries) -> str:
    return json.dumps({
        "id": s.id,
        "label": s.label,
        "timestamps": s.timestamps,
        "observations": s.observations.tolist(),
        "horizon": s.horizon,
    }, separators=(",", ":"))


def dumps_jsonl(ds: Dataset) -> str:
    header = {
        "version": FORMAT_VERSION,
        "num_classes": ds.num_classes,
        "feature_dim": ds.feature_dim,
        "nominal_length": ds.nominal_length,
        "missing_rate": ds.missing_rate,
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    lines += [_series_to_json(s) for s in ds.series]
    return "\n".join(lines) + "\n"


def save_jsonl(ds: Dataset, path) -> None:
    atomic_write_text(path, dumps_jsonl(ds))


def loads_jsonl(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed header: {e.msg}", line=1) from None
    need = ("version", "num_classes", "feature_dim", "nominal_length", "missing_rate")
    if not isinstance(header, dict) or any(k not in header for k in need):
        raise ParseError(f"header must contain {need}", line=1)
    if header["version"] != FORMAT_VERSION:
        raise ParseError(f"unsupported version {header['version']}", line=1)
    series = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            s = TimeSeries(
                str(rec["id"]),
                rec["timestamps"],
                np.array(rec["observations"], dtype=np.float64).reshape(len(rec["timestamps"]), -1)
                if rec["timestamps"] else np.zeros((0, header["feature_dim"])),
                int(rec["label"]),
                int(rec["horizon"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"malformed record ({type(e).__name__}: {e})", line=lineno) from None
        try:
            s.validate(header["feature_dim"], header["num_classes"])
        except ValidationError as e:
            raise ValidationError(f"line {lineno}: {e}") from None
        series.append(s)
    ds = Dataset(series, int(header["num_classes"]), int(header["feature_dim"]),
                 int(header["nominal_length"]), float(header["missing_rate"]))
    if ds.num_classes < 2:
        raise ValidationError("header num_classes must be >= 2")
    return ds


def load_jsonl(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_jsonl(fh.read())


# -- splits and transforms --------------------------------------------------

DEFAULT_FRACTIONS = (0.64, 0.16, 0.20)


def split(ds: Dataset, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0):
    """Seeded shuffle, then partition into (train, val, test)."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fractions[0] * n + 0.5))
    n_val = min(int(math.floor(fractions[1] * n + 0.5)), n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(ds.with_series([ds.series[i] for i in sorted(p)]) for p in parts)


def _check_fraction(fraction):
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")


def truncate_leading(series: TimeSeries, fraction: float, nominal_length: int) -> TimeSeries:
    """Keep observations with timestamp < floor(fraction * T); horizon is kept."""
    _check_fraction(fraction)
    cutoff = math.floor(fraction * nominal_length)
    if fraction == 1:
        cutoff = max(cutoff, series.timestamps[-1] + 1)
    keep = [i for i, t in enumerate(series.timestamps) if t < cutoff]
    if not keep:
        raise EmptyInputError(f"series {series.id}: no observations before t={cutoff}")
    return series.select(keep)


def sparsify(series: TimeSeries, fraction: float, rng: np.random.Generator) -> TimeSeries:
    """Keep round(fraction * count) observations (at least one), chosen uniformly."""
    _check_fraction(fraction)
    n = len(series)
    k = max(1, int(math.floor(fraction * n + 0.5)))
    if k >= n:
        return series.select(np.arange(n))
    return series.select(rng.choice(n, size=k, replace=False))


def subset(ds: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """Uniform random subset of whole series."""
    _check_fraction(fraction)
    k = int(math.floor(fraction * len(ds) + 0.5))
    if k == 0:
        raise EmptyInputError(f"subset fraction {fraction} of {len(ds)} series is empty")
    if k >= len(ds):
        return ds.with_series(ds.series)
    idx = np.sort(rng.choice(len(ds), size=k, replace=False))
    return ds.with_series([ds.series[i] for i in idx])


def map_series(ds: Dataset, fn) -> Dataset:
    return ds.with_series([fn(s) for s in ds.series])


def benchmark(seed: int = 0, n_train: int = 2000, n_val: int = 500, n_test: int = 500, **spec_kw):
    """Default synthetic benchmark as (train, val, test).

    One dataset of ``n_train + n_val + n_test`` series is generated and
    split by a seeded shuffle into parts of exactly the requested sizes.
    """
    n = n_train + n_val + n_test
    ds = generate(SynthSpec(n_series=n, seed=seed, **spec_kw))
    order = np.random.default_rng([seed, 0x5B11]).permutation(n)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(ds.with_series([ds.series[i] for i in sorted(p)]) for p in parts)

"""The ODE-RNN sequence classifier and its recurrent baselines.

Between observations the hidden state follows the learned dynamics
(Euler prediction step); at each observation a recurrent cell
assimilates the input (update step). After the last observation the
dynamics carry the state on to the series horizon, where a batch-normed
linear classifier produces class probabilities. Switching the dynamics
off gives the plain recurrent baselines, optionally with an elapsed-time
input feature or a sinusoidal time encoding.

Two evaluation paths exist. :func:`encode` walks one series gap by gap
and is the readable reference. :func:`forward_batch` runs many series on
a shared integer time grid and keeps a tape for :func:`backward_batch`;
training uses it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import cells as C
from ._files import atomic_write_text
from .data import TimeSeries
from .errors import ConfigError, DimensionError, EmptyInputError, ValidationError
from .node import DynamicsNet, SolveConfig, euler_solve, ode_gradients, steps_for_gap
from .tensorcore import (
    BatchNormState,
    ParamStore,
    affine,
    affine_backward,
    batchnorm,
    batchnorm_backward,
    softmax,
    uniform_init,
)

CELL_TYPES = ("tanh", "lstm", "gru")
TIME_FEATURES = ("none", "delta_t", "pe")
CHECKPOINT_FORMAT = "irregts-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    cell: str = "gru"
    hidden_dim: int = 80
    f_theta_units: int = 255
    f_theta_layers: int = 2
    ode_enabled: bool = True
    time_features: str = "none"
    pe_tau: float = 1000.0
    gating_depth: int = 1
    gating_width: Optional[int] = None
    num_classes: int = 2
    feature_dim: int = 1
    solve: SolveConfig = field(default_factory=SolveConfig)
    time_input: bool = False
    time_scale: float = 1.0
    extrapolation: str = "hold"
    init_sigma: float = 1e-4
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.cell not in CELL_TYPES:
            raise ConfigError(f"cell must be one of {CELL_TYPES}, got {self.cell!r}")
        if self.time_features not in TIME_FEATURES:
            raise ConfigError(f"time_features must be one of {TIME_FEATURES}, got {self.time_features!r}")
        if self.hidden_dim < 1 or self.f_theta_units < 1:
            raise ConfigError("hidden_dim and f_theta_units must be positive")
        if self.f_theta_layers != 2:
            raise ConfigError("the dynamics network has exactly two layers")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.gating_depth not in (1, 2):
            raise ConfigError("gating_depth must be 1 or 2")
        if self.extrapolation not in ("hold", "mean"):
            raise ConfigError("extrapolation must be 'hold' or 'mean'")
        if self.init_sigma < 0 or self.pe_tau <= 0:
            raise ConfigError("init_sigma must be >= 0 and pe_tau > 0")
        return self

    @property
    def input_dim(self) -> int:
        return self.feature_dim + (1 if self.time_features == "delta_t" else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        solve = d.pop("solve", None) or {}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(solve=SolveConfig(**solve), **d).validate()


# Baselines use the larger hidden state the recurrent models were tuned to.
PRESETS: Dict[str, dict] = {}
for _cell, _name in (("gru", "gru"), ("lstm", "lstm"), ("tanh", "rnn")):
    PRESETS[_name] = dict(cell=_cell, ode_enabled=False, time_features="none", hidden_dim=150)
    PRESETS[f"{_name}-dt"] = dict(cell=_cell, ode_enabled=False, time_features="delta_t", hidden_dim=150)
    PRESETS[f"{_name}-pe"] = dict(cell=_cell, ode_enabled=False, time_features="pe", hidden_dim=150)
    PRESETS[f"ode-{_name}"] = dict(cell=_cell, ode_enabled=True, time_features="none", hidden_dim=80)


def preset(name: str, feature_dim: int, num_classes: int, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(PRESETS)}")
    kw = {**PRESETS[name], **overrides}
    return ModelConfig(feature_dim=feature_dim, num_classes=num_classes, **kw).validate()


def init_hidden(size, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Small Gaussian noise for the initial hidden (and LSTM cell) state."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.zeros(size)
    return sigma * rng.standard_normal(size)


class StepBatchNorm:
    """Pre-update normalization with running statistics per time step.

    Scale and shift are shared by all steps; each integer time step keeps
    its own running mean/variance because the hidden-state distribution
    drifts over the season. Steps past the last trained slot reuse it.
    """

    def __init__(self, base: BatchNormState):
        self.base = base
        self.slots: List[BatchNormState] = []

    @property
    def gamma(self):
        return self.base.gamma

    @property
    def mode(self):
        return self.base.mode

    @mode.setter
    def mode(self, value):
        self.base.mode = value
        for s in self.slots:
            s.mode = value

    def _new_slot(self):
        H = self.base.gamma.shape[0]
        return BatchNormState(self.base.gamma, self.base.beta, np.zeros(H), np.ones(H),
                              self.base.eps, self.base.momentum, self.base.mode)

    def at(self, t: int, grow: bool = False) -> BatchNormState:
        if grow:
            while len(self.slots) <= t:
                self.slots.append(self._new_slot())
        if not self.slots:
            return self.base
        return self.slots[min(t, len(self.slots) - 1)]

    def running_stats(self):
        return [(s.running_mean.copy(), s.running_var.copy()) for s in self.slots]

    def load_running_stats(self, stats) -> None:
        self.slots = []
        for mean, var in stats:
            slot = self._new_slot()
            slot.running_mean[...] = mean
            slot.running_var[...] = var
            self.slots.append(slot)


class SequenceEncoder:
    """All trainable state of one classifier plus its configuration."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        H, K = cfg.hidden_dim, cfg.num_classes
        rng = np.random.default_rng(cfg.seed)
        self.params = ParamStore()
        self.cell = C.init_cell_params(cfg.cell, cfg.input_dim, H, rng, self.params,
                                       depth=cfg.gating_depth, width=cfg.gating_width)
        self.params.add("clf.W", uniform_init(rng, (K, H)))
        self.params.add("clf.b", np.zeros(K))
        self.bn_upd = StepBatchNorm(self._make_bn("bn_upd", H))
        self.bn_cls = self._make_bn("bn_cls", H)
        # created last so that toggling the dynamics keeps the other weights
        self.net = None
        if cfg.ode_enabled:
            self.net = DynamicsNet.create(H, cfg.f_theta_units, rng, self.params,
                                          time_input=cfg.time_input, time_scale=cfg.time_scale)
        h_rng = np.random.default_rng([cfg.seed, 0x40])
        self.h0 = init_hidden(H, cfg.init_sigma, h_rng)
        self.c0 = init_hidden(H, cfg.init_sigma, h_rng) if cfg.cell == "lstm" else None
        self.input_mean = np.zeros(cfg.feature_dim)

    def _make_bn(self, prefix, H):
        gamma = self.params.add(f"{prefix}.gamma", np.ones(H))
        beta = self.params.add(f"{prefix}.beta", np.zeros(H))
        return BatchNormState(gamma, beta, np.zeros(H), np.ones(H), mode="eval")

    @property
    def is_lstm(self):
        return self.cfg.cell == "lstm"

    def set_mode(self, mode: str) -> None:
        self.bn_upd.mode = mode
        self.bn_cls.mode = mode

    def snapshot(self) -> dict:
        return {
            "params": self.params.state_dict(),
            "bn_upd": self.bn_upd.running_stats(),
            "bn_cls": (self.bn_cls.running_mean.copy(), self.bn_cls.running_var.copy()),
        }

    def restore(self, snap: dict) -> None:
        self.params.load_state_dict(snap["params"])
        self.bn_upd.load_running_stats(snap["bn_upd"])
        self.bn_cls.running_mean[...], self.bn_cls.running_var[...] = snap["bn_cls"]

    def zero_dynamics(self) -> None:
        """Zero the output layer of the dynamics network (f == 0)."""
        if self.net is not None:
            self.net["W2"].fill(0.0)
            self.net["b2"].fill(0.0)


def build_encoder(cfg: ModelConfig) -> SequenceEncoder:
    return SequenceEncoder(cfg)


# -- input preparation ------------------------------------------------------

def positional_encoding(days, d: int, tau: float = 1000.0) -> np.ndarray:
    """``sin(day / tau**(2i/d) + (pi/2) * (i mod 2))`` for i in [0, d)."""
    days = np.asarray(days, dtype=np.float64)[:, None]
    i = np.arange(d)
    return np.sin(days / tau ** (2 * i / d) + (np.pi / 2) * (i % 2))


def augment_inputs(series: TimeSeries, mode: str, tau: float = 1000.0, d: Optional[int] = None) -> TimeSeries:
    if mode == "none":
        return series
    obs = series.observations
    ts = np.asarray(series.timestamps, dtype=np.float64)
    if mode == "delta_t":
        gaps = np.diff(ts, prepend=ts[0])
        return replace(series, observations=np.concatenate([obs, gaps[:, None]], axis=1))
    if mode == "pe":
        d = d or series.feature_dim
        if d != series.feature_dim:
            raise DimensionError(f"positional encoding dim {d} != feature dim {series.feature_dim}")
        return replace(series, observations=obs + positional_encoding(ts - ts[0], d, tau))
    raise ConfigError(f"unknown time-feature mode {mode!r}")


def extend_with_means(series: TimeSeries, means: np.ndarray, horizon: Optional[int] = None) -> TimeSeries:
    """Append channel-mean pseudo-observations after the last one, up to the horizon."""
    horizon = series.horizon if horizon is None else horizon
    extra = list(range(series.timestamps[-1] + 1, horizon + 1))
    if not extra:
        return series
    obs = np.concatenate([series.observations, np.tile(means, (len(extra), 1))])
    return replace(series, timestamps=series.timestamps + extra, observations=obs)


def prepare_series(series: TimeSeries, enc: SequenceEncoder, horizon: Optional[int] = None) -> TimeSeries:
    cfg = enc.cfg
    if len(series) == 0:
        raise EmptyInputError(f"series {series.id} has no observations")
    if series.feature_dim != cfg.feature_dim:
        raise DimensionError(f"series {series.id}: feature dim {series.feature_dim} != model {cfg.feature_dim}")
    if not cfg.ode_enabled and cfg.extrapolation == "mean":
        series = extend_with_means(series, enc.input_mean, horizon)
    return augment_inputs(series, cfg.time_features, cfg.pe_tau, cfg.feature_dim)


# -- single-series reference path -------------------------------------------

def _cell_update(enc: SequenceEncoder, t: int, x, h, c):
    """Pre-update batch norm (eval statistics) followed by the cell."""
    hn, _ = batchnorm(h[None, :], enc.bn_upd.at(t), mode="eval")
    x = x[None, :]
    if enc.cfg.cell == "gru":
        return C.gru_forward(x, hn, enc.cell)[0][0], c
    if enc.cfg.cell == "lstm":
        (h1, c1), _ = C.lstm_forward(x, hn, c[None, :], enc.cell)
        return h1[0], c1[0]
    return C.rnn_tanh_forward(x, hn, enc.cell)[0][0], c


def encode(series: TimeSeries, enc: SequenceEncoder, horizon: Optional[int] = None,
           record: Optional[list] = None) -> np.ndarray:
    """Hidden state at ``horizon`` (default: the series horizon).

    If ``record`` is a list, events are appended to it: ``("solve", t0, t1,
    n_steps, h)`` and ``("update", t, h)`` with the state after the event.
    """
    cfg = enc.cfg
    horizon = series.horizon if horizon is None else horizon
    if len(series) == 0:
        raise EmptyInputError(f"series {series.id} has no observations")
    if horizon < series.timestamps[-1]:
        raise ValidationError(f"horizon {horizon} precedes last observation {series.timestamps[-1]}")
    s = prepare_series(series, enc, horizon)
    h = enc.h0.copy()
    c = enc.c0.copy() if enc.is_lstm else None
    t_prev = 0
    for t, x in zip(s.timestamps, s.observations):
        if cfg.ode_enabled and t > t_prev:
            n = steps_for_gap(t_prev, t, cfg.solve)
            h = euler_solve(enc.net, h, t_prev, t, n)
            if record is not None:
                record.append(("solve", t_prev, t, n, h.copy()))
        h, c = _cell_update(enc, t, x, h, c)
        if record is not None:
            record.append(("update", t, h.copy()))
        t_prev = t
    if cfg.ode_enabled and horizon > t_prev:
        n = steps_for_gap(t_prev, horizon, cfg.solve)
        h = euler_solve(enc.net, h, t_prev, horizon, n)
        if record is not None:
            record.append(("solve", t_prev, horizon, n, h.copy()))
    return h


def logits_from_hidden(h_T, enc: SequenceEncoder) -> np.ndarray:
    hb, _ = batchnorm(np.atleast_2d(h_T), enc.bn_cls, mode="eval")
    z = affine(hb, enc.params["clf.W"], enc.params["clf.b"])
    return z[0] if np.ndim(h_T) == 1 else z


def classify(h_T, enc: SequenceEncoder) -> np.ndarray:
    return softmax(logits_from_hidden(h_T, enc))


def predict(series: TimeSeries, enc: SequenceEncoder):
    """``(label, probs)``; ties go to the lowest class index."""
    probs = classify(encode(series, enc), enc)
    return int(np.argmax(probs)), probs


# -- batched grid path ------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray        # (B, G, d_in), zeros where unobserved
    mask: np.ndarray     # (B, G) bool
    horizon: np.ndarray  # (B,)
    labels: np.ndarray   # (B,)

    def __len__(self):
        return self.x.shape[0]


def make_batch(series_list: Sequence[TimeSeries], enc: SequenceEncoder) -> Batch:
    if not series_list:
        raise EmptyInputError("empty batch")
    prepared = [prepare_series(s, enc) for s in series_list]
    horizon = np.array([s.horizon for s in series_list], dtype=int)
    for s, hz in zip(prepared, horizon):
        if s.timestamps[-1] > hz:
            raise ValidationError(f"series {s.id}: observation after horizon")
    G = int(horizon.max()) + 1
    B = len(prepared)
    x = np.zeros((B, G, enc.cfg.input_dim))
    mask = np.zeros((B, G), dtype=bool)
    for b, s in enumerate(prepared):
        x[b, s.timestamps] = s.observations
        mask[b, s.timestamps] = True
    labels = np.array([s.label for s in series_list], dtype=int)
    return Batch(x, mask, horizon, labels)


@dataclass
class BatchForward:
    logits: np.ndarray
    probs: np.ndarray
    h_final: np.ndarray
    tape: list
    cls_cache: tuple


def _bn_mode(train: bool, count: int) -> str:
    # batch statistics of a single row are degenerate; fall back to running stats
    return "train" if train and count >= 2 else "eval"


def forward_batch(enc: SequenceEncoder, batch: Batch, train: bool = False,
                  rng: Optional[np.random.Generator] = None, update_stats: bool = True) -> BatchForward:
    """Run all series of ``batch`` on the shared integer time grid.

    ``train`` selects batch statistics for the normalizations. The initial
    state is ``enc.h0`` for every series unless ``rng`` is given, in which
    case each series draws its own.
    """
    cfg = enc.cfg
    B, G = batch.mask.shape
    H = cfg.hidden_dim
    if rng is not None:
        h = init_hidden((B, H), cfg.init_sigma, rng)
        c = init_hidden((B, H), cfg.init_sigma, rng) if enc.is_lstm else None
    else:
        h = np.tile(enc.h0, (B, 1))
        c = np.tile(enc.c0, (B, 1)) if enc.is_lstm else None
    n = cfg.solve.steps_multiplier
    keep = cfg.solve.gradient_mode == "discrete"
    tape = []
    for t in range(G):
        if cfg.ode_enabled and t > 0:
            rows = np.flatnonzero(batch.horizon >= t)
            if rows.size:
                h_in = h[rows]
                if keep:
                    h_out, trace = euler_solve(enc.net, h_in, t - 1, t, n, keep_states=True)
                else:
                    h_out, trace = euler_solve(enc.net, h_in, t - 1, t, n), None
                h = h.copy()
                h[rows] = h_out
                tape.append(("ode", t, rows, h_in, h_out, trace))
        rows = np.flatnonzero(batch.mask[:, t])
        if rows.size:
            mode = _bn_mode(train, rows.size)
            bn = enc.bn_upd.at(t, grow=train and update_stats)
            hn, bn_cache = batchnorm(h[rows], bn, update_running=update_stats, mode=mode)
            x = batch.x[rows, t]
            h = h.copy()
            if cfg.cell == "gru":
                h[rows], cc = C.gru_forward(x, hn, enc.cell)
            elif cfg.cell == "lstm":
                (h[rows], c_new), cc = C.lstm_forward(x, hn, c[rows], enc.cell)
                c = c.copy()
                c[rows] = c_new
            else:
                h[rows], cc = C.rnn_tanh_forward(x, hn, enc.cell)
            tape.append(("upd", t, rows, bn_cache, cc))
    mode = _bn_mode(train, B)
    hb, bn_cache = batchnorm(h, enc.bn_cls, update_running=update_stats, mode=mode)
    logits = affine(hb, enc.params["clf.W"], enc.params["clf.b"])
    return BatchForward(logits, softmax(logits), h, tape, (hb, bn_cache))


def backward_batch(enc: SequenceEncoder, fwd: BatchForward, dlogits: np.ndarray) -> None:
    """Accumulate parameter gradients of ``sum(dlogits * logits)`` into ``enc.params``."""
    cfg = enc.cfg
    P = enc.params
    hb, cls_cache = fwd.cls_cache
    dhb, dW, db = affine_backward(dlogits, hb, P["clf.W"])
    grads = {"clf.W": dW, "clf.b": db}
    dh, dgam, dbet = batchnorm_backward(dhb, cls_cache, enc.bn_cls)
    grads["bn_cls.gamma"], grads["bn_cls.beta"] = dgam, dbet
    P.accumulate(grads)
    dc = np.zeros_like(dh) if enc.is_lstm else None
    n = cfg.solve.steps_multiplier
    mode = cfg.solve.gradient_mode
    for entry in reversed(fwd.tape):
        if entry[0] == "upd":
            _, t, rows, bn_cache, cc = entry
            if cfg.cell == "gru":
                _, dhn, g = C.gru_backward(cc, dh[rows], enc.cell)
            elif cfg.cell == "lstm":
                _, dhn, dc_prev, g = C.lstm_backward(cc, dh[rows], dc[rows], enc.cell)
                dc[rows] = dc_prev
            else:
                _, dhn, g = C.rnn_tanh_backward(cc, dh[rows], enc.cell)
            P.accumulate(g)
            dh_rows, dgam, dbet = batchnorm_backward(dhn, bn_cache, enc.bn_upd.base)
            P.accumulate({"bn_upd.gamma": dgam, "bn_upd.beta": dbet})
            dh[rows] = dh_rows
        else:
            _, t, rows, h_in, h_out, trace = entry
            dh0, g = ode_gradients(enc.net, h_in, t - 1, t, n, dh[rows], mode=mode,
                                   trace=trace, h1=h_out)
            P.accumulate(g)
            dh[rows] = dh0


def predict_batch(enc: SequenceEncoder, series_list: Sequence[TimeSeries], chunk: int = 1000) -> np.ndarray:
    """Class probabilities for many series with eval-mode normalization."""
    out = []
    for i in range(0, len(series_list), chunk):
        batch = make_batch(series_list[i:i + chunk], enc)
        out.append(forward_batch(enc, batch, train=False).probs)
    return np.concatenate(out)


# -- checkpoints ------------------------------------------------------------

def checkpoint_dict(enc: SequenceEncoder) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": enc.cfg.to_dict(),
        "params": {n: {"shape": list(enc.params[n].shape), "values": enc.params[n].ravel().tolist()}
                   for n in enc.params},
        "batchnorm": {
            "eps": enc.bn_cls.eps,
            "momentum": enc.bn_cls.momentum,
            "upd": [{"running_mean": m.tolist(), "running_var": v.tolist()}
                    for m, v in enc.bn_upd.running_stats()],
            "cls": {"running_mean": enc.bn_cls.running_mean.tolist(),
                    "running_var": enc.bn_cls.running_var.tolist()},
        },
        "input_mean": enc.input_mean.tolist(),
    }


def save_checkpoint(enc: SequenceEncoder, path) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(enc), sort_keys=True) + "\n")


def encoder_from_dict(d: dict) -> SequenceEncoder:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError("not a model checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {d.get('version')}")
    enc = SequenceEncoder(ModelConfig.from_dict(d["config"]))
    if set(d["params"]) != set(enc.params):
        raise ValidationError("checkpoint parameters do not match the configuration")
    for name, entry in d["params"].items():
        enc.params.assign(name, np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
    rec = d["batchnorm"]
    for bn in (enc.bn_upd.base, enc.bn_cls):
        bn.eps, bn.momentum = rec["eps"], rec["momentum"]
    enc.bn_upd.load_running_stats([(np.array(r["running_mean"]), np.array(r["running_var"]))
                                   for r in rec["upd"]])
    enc.bn_cls.running_mean[...] = rec["cls"]["running_mean"]
    enc.bn_cls.running_var[...] = rec["cls"]["running_var"]
    enc.input_mean = np.array(d["input_mean"], dtype=np.float64)
    return enc


def load_checkpoint(path) -> SequenceEncoder:
    with open(path, "r", encoding="utf-8") as fh:
        return encoder_from_dict(json.load(fh))

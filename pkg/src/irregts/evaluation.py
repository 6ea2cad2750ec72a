"""Metrics and the experiment sweeps (early, sparsity, datasize, keepprob)."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._files import atomic_write_text
from .data import Dataset, map_series, sparsify, subset, truncate_leading
from .errors import ConfigError, DimensionError, EmptyInputError
from .model import ModelConfig, SequenceEncoder, predict_batch

log = logging.getLogger(__name__)

SWEEP_KINDS = ("early", "sparsity", "datasize", "keepprob")
DEFAULT_GRIDS = {
    "early": (1.0, 0.75, 0.5),
    "sparsity": (1.0, 0.75, 0.5, 0.25),
    "datasize": (1.0, 0.1, 0.01),
    "keepprob": (0.5, 0.65, 0.75, 0.9, 1.0),
}


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def to_csv(self) -> str:
        K = self.num_classes
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(k) for k in range(K)])
        for k in range(K):
            w.writerow([str(k)] + [str(int(v)) for v in self.counts[k]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64))


def confusion(preds: Sequence[int], labels: Sequence[int], K: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    if preds.size and (preds.min() < 0 or labels.min() < 0 or preds.max() >= K or labels.max() >= K):
        raise ValueError(f"class index outside [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyInputError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    """F1 per class; NaN for classes never present and never predicted."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    out = np.full(cm.num_classes, np.nan)
    seen = (tp + fp + fn) > 0
    # 2PR/(P+R) reduces to 2TP/(2TP+FP+FN), which is 0 when TP is 0
    out[seen] = 2 * tp[seen] / (2 * tp[seen] + fp[seen] + fn[seen])
    return out


def macro_f1(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyInputError("macro-F1 of an empty confusion matrix")
    f1 = per_class_f1(cm)
    return float(np.nanmean(f1))


def run_eval(enc: SequenceEncoder, test: Dataset) -> dict:
    """Full-sequence evaluation; no subsampling."""
    if test.feature_dim != enc.cfg.feature_dim:
        raise DimensionError(f"dataset feature dim {test.feature_dim} != model {enc.cfg.feature_dim}")
    if len(test) == 0:
        raise EmptyInputError("empty test set")
    probs = predict_batch(enc, test.series)
    preds = probs.argmax(axis=1)
    cm = confusion(preds, test.labels(), enc.cfg.num_classes)
    return {"accuracy": accuracy(cm), "macro_f1": macro_f1(cm), "n": cm.total,
            "confusion": cm.counts.tolist(), "cm": cm}


def metrics_json(metrics: dict) -> str:
    return json.dumps({k: v for k, v in metrics.items() if k != "cm"}, indent=2, sort_keys=True) + "\n"


# -- sweeps -----------------------------------------------------------------

@dataclass
class SweepRow:
    model: str
    condition: float
    metric: str
    mean: float
    std: float
    n_seeds: int


@dataclass
class SweepReport:
    kind: str
    rows: List[SweepRow] = field(default_factory=list)
    runs: List[dict] = field(default_factory=list)  # model, condition, seed, accuracy, macro_f1

    def get(self, model, condition, metric="accuracy") -> SweepRow:
        for r in self.rows:
            if r.model == model and r.condition == condition and r.metric == metric:
                return r
        raise KeyError((model, condition, metric))

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "model", "condition", "seed", "accuracy", "macro_f1"])
        for r in self.runs:
            w.writerow([self.kind, r["model"], repr(r["condition"]), r["seed"],
                        repr(r["accuracy"]), repr(r["macro_f1"])])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "model", "condition", "metric", "mean", "std", "n_seeds"])
        for r in self.rows:
            w.writerow([self.kind, r.model, repr(r.condition), r.metric, repr(r.mean), repr(r.std), r.n_seeds])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "rows": [r.__dict__ for r in self.rows],
            "runs": self.runs,
        }, indent=2, sort_keys=True) + "\n"


def read_summary_csv(path_or_text) -> List[dict]:
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text, "r", encoding="utf-8") as fh:
            text = fh.read()
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["mean"] = float(r["mean"])
        r["std"] = float(r["std"])
        r["n_seeds"] = int(r["n_seeds"])
    return rows


def truncate_dataset(ds: Dataset, fraction: float, nominal: int) -> Dataset:
    """Truncate every series; series left without observations are dropped."""
    kept = []
    for s in ds.series:
        try:
            kept.append(truncate_leading(s, fraction, nominal))
        except EmptyInputError:
            log.info("series %s has no observations in the leading %.2f; skipped", s.id, fraction)
    return ds.with_series(kept)


def _diff_name(a, b):
    return f"{a} - {b}"


def _run_cell(args):
    """One (model, condition, seed) cell. Module-level so it can be pickled."""
    kind, name, mcfg, tcfg, condition, seed, train, val, test, nominal = args
    from .train import fit

    rng = np.random.default_rng([seed, 0x5EED])
    mcfg = replace(mcfg, seed=seed)
    tcfg = replace(tcfg, seed=seed)
    if kind == "sparsity":
        train = map_series(train, lambda s: sparsify(s, condition, rng))
        val = map_series(val, lambda s: sparsify(s, condition, rng))
        test = map_series(test, lambda s: sparsify(s, condition, rng))
    elif kind == "datasize":
        train = subset(train, condition, rng)
    elif kind == "keepprob":
        tcfg = replace(tcfg, keep_prob=condition)
    enc, _ = fit(train, val, mcfg, tcfg)
    if kind == "early":
        out = []
        for f in condition:
            m = run_eval(enc, truncate_dataset(test, f, nominal))
            out.append((f, m["accuracy"], m["macro_f1"]))
        return out
    m = run_eval(enc, test)
    return [(condition, m["accuracy"], m["macro_f1"])]


def sweep(kind: str, models: Sequence[Tuple[str, ModelConfig]], grid: Sequence[float],
          seeds: Sequence[int], data: Tuple[Dataset, Dataset, Dataset], tcfg,
          jobs: int = 1) -> SweepReport:
    """Train/evaluate every (model, condition, seed) and aggregate over seeds.

    ``early`` trains once per (model, seed) on full series and evaluates on
    truncated test series; the other kinds retrain per condition.
    Difference rows compare the first model with each other model.
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"sweep kind must be one of {SWEEP_KINDS}")
    grid = [float(g) for g in grid]
    if not grid or any(not 0 < g <= 1 for g in grid):
        raise ConfigError(f"grid values must lie in (0, 1], got {grid}")
    if not seeds:
        raise ConfigError("at least one seed is required")
    if not models:
        raise ConfigError("at least one model is required")
    train, val, test = data
    nominal = test.nominal_length
    cells = []
    for name, mcfg in models:
        for seed in seeds:
            if kind == "early":
                cells.append((name, seed, (kind, name, mcfg, tcfg, tuple(grid), seed, train, val, test, nominal)))
            else:
                for g in grid:
                    cells.append((name, seed, (kind, name, mcfg, tcfg, g, seed, train, val, test, nominal)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, [c[2] for c in cells]))
    else:
        results = []
        for name, seed, args in cells:
            log.info("sweep %s: model %s seed %d", kind, name, seed)
            results.append(_run_cell(args))

    runs = {}
    for (name, seed, _), res in zip(cells, results):
        for cond, acc, f1 in res:
            runs[(name, cond, seed)] = {"model": name, "condition": cond, "seed": seed,
                                        "accuracy": acc, "macro_f1": f1}
    names = [n for n, _ in models]
    ordered = [runs[(n, g, s)] for n in names for g in grid for s in seeds]
    for other in names[1:]:
        for g in grid:
            for s in seeds:
                a, b = runs[(names[0], g, s)], runs[(other, g, s)]
                ordered.append({"model": _diff_name(names[0], other), "condition": g, "seed": s,
                                "accuracy": a["accuracy"] - b["accuracy"],
                                "macro_f1": a["macro_f1"] - b["macro_f1"]})
    report = SweepReport(kind, runs=ordered)
    groups: Dict[Tuple[str, float], List[dict]] = {}
    for r in ordered:
        groups.setdefault((r["model"], r["condition"]), []).append(r)
    for (model, cond), rs in groups.items():
        for metric in ("accuracy", "macro_f1"):
            vals = np.array([r[metric] for r in rs])
            report.rows.append(SweepRow(model, cond, metric, float(vals.mean()), float(vals.std()), len(vals)))
    return report


def write_report(report: SweepReport, prefix) -> dict:
    """Write ``<prefix>.csv`` (per-seed runs), ``<prefix>_summary.csv`` and ``<prefix>.json``."""
    prefix = str(prefix)
    paths = {"runs": prefix + ".csv", "summary": prefix + "_summary.csv", "json": prefix + ".json"}
    atomic_write_text(paths["runs"], report.runs_csv())
    atomic_write_text(paths["summary"], report.summary_csv())
    atomic_write_text(paths["json"], report.to_json())
    return paths

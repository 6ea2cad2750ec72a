"""Loss, Adamax, learning-rate decay, the subsampling regularizer and ``fit``."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ._files import atomic_write_text
from .data import Dataset, TimeSeries
from .errors import ConfigError, EmptyInputError, LabelError, NumericError, TrainingDivergedError
from .model import ModelConfig, SequenceEncoder, backward_batch, forward_batch, make_batch
from .tensorcore import ParamStore

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    lr0: float = 0.07
    decay: float = 0.9995
    batch_size: Optional[int] = None  # None: 500 with dynamics, 300 without
    epochs: int = 12
    max_batches: Optional[int] = None
    keep_prob: float = 0.75
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    subsample: bool = True

    def validate(self) -> "TrainConfig":
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("keep_prob must lie in (0, 1]")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_batches is not None and self.max_batches < 1:
            raise ConfigError("max_batches must be >= 1")
        return self

    def resolved_batch_size(self, mcfg: ModelConfig) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 500 if mcfg.ode_enabled else 300

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise LabelError(f"label {label} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(probs[label], PROB_FLOOR)))


def batch_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over the rows of ``probs``."""
    K = probs.shape[1]
    if np.any((labels < 0) | (labels >= K)):
        raise LabelError("label outside the class range")
    p = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def subsample(series: TimeSeries, p: float, rng: np.random.Generator) -> TimeSeries:
    """Keep each observation independently with probability ``p``.

    At least one observation always survives; timestamps and horizon are
    unchanged. Random numbers are drawn even for ``p == 1`` so that the
    stream advances identically.
    """
    if not 0 < p <= 1:
        raise ConfigError("keep probability must lie in (0, 1]")
    n = len(series)
    keep = rng.random(n) < p
    while not keep.any():
        keep = rng.random(n) < p
    if keep.all():
        return series
    return series.select(np.flatnonzero(keep))


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    u: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamax_update(params: ParamStore, state: OptimizerState, lr: float,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adamax step on every parameter, in place."""
    for name in params:
        if not np.all(np.isfinite(params.grad(name))):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    corr = lr / (1.0 - beta1 ** state.t)
    for name in params:
        g = params.grad(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.u[name] = np.zeros_like(g)
        m = state.m[name]
        u = state.u[name]
        m *= beta1
        m += (1.0 - beta1) * g
        np.maximum(beta2 * u, np.abs(g), out=u)
        theta = params[name]
        theta -= corr * m / (u + eps)


def lr_schedule(k: int, cfg: TrainConfig) -> float:
    if k < 0:
        raise ValueError("batch index must be >= 0")
    return cfg.lr0 * cfg.decay ** k


@dataclass
class History:
    batches: List[dict] = field(default_factory=list)   # batch, epoch, lr, loss
    epochs: List[dict] = field(default_factory=list)    # epoch, train_loss, val_accuracy, val_macro_f1
    best_epoch: Optional[int] = None

    def losses(self) -> List[float]:
        return [b["loss"] for b in self.batches]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["batch", "epoch", "lr", "loss"])
        for b in self.batches:
            w.writerow([b["batch"], b["epoch"], repr(b["lr"]), repr(b["loss"])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"num_batches": len(self.batches), "epochs": self.epochs, "best_epoch": self.best_epoch,
                "final_loss": self.batches[-1]["loss"] if self.batches else None}

    def write(self, csv_path, json_path=None) -> None:
        atomic_write_text(csv_path, self.to_csv())
        if json_path is not None:
            atomic_write_text(json_path, json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def train_step(enc: SequenceEncoder, series: List[TimeSeries], rng: np.random.Generator) -> float:
    """Forward and backward one mini-batch; gradients are left in ``enc.params``."""
    batch = make_batch(series, enc)
    enc.params.zero_grad()
    fwd = forward_batch(enc, batch, train=True, rng=rng)
    loss = batch_cross_entropy(fwd.probs, batch.labels)
    onehot = np.zeros_like(fwd.probs)
    onehot[np.arange(len(batch)), batch.labels] = 1.0
    backward_batch(enc, fwd, (fwd.probs - onehot) / len(batch))
    return loss


def fit(train: Dataset, val: Dataset, mcfg: ModelConfig, tcfg: TrainConfig,
        evaluate=None, progress: bool = False):
    """Train a fresh model; return ``(encoder, history)``.

    The returned encoder holds the weights of the epoch with the best
    validation macro-F1.
    """
    from .evaluation import run_eval

    tcfg.validate()
    if len(train) == 0 or len(val) == 0:
        raise EmptyInputError("training and validation sets must be nonempty")
    if train.feature_dim != mcfg.feature_dim or val.feature_dim != mcfg.feature_dim:
        raise ConfigError("dataset feature_dim does not match the model")
    enc = SequenceEncoder(mcfg)
    enc.input_mean = train.channel_means()
    evaluate = evaluate or run_eval
    shuffle_rng, sub_rng, noise_rng = (np.random.default_rng(s)
                                       for s in np.random.SeedSequence(tcfg.seed).spawn(3))
    opt = OptimizerState()
    bs = tcfg.resolved_batch_size(mcfg)
    hist = History()
    best_f1, best = -1.0, None
    k = 0
    done = False
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(len(train))
        ep_losses = []
        for start in range(0, len(order), bs):
            chunk = [train.series[i] for i in order[start:start + bs]]
            if tcfg.subsample:
                chunk = [subsample(s, tcfg.keep_prob, sub_rng) for s in chunk]
            enc.set_mode("train")
            loss = train_step(enc, chunk, noise_rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(k, loss)
            lr = lr_schedule(k, tcfg)
            adamax_update(enc.params, opt, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            hist.batches.append({"batch": k, "epoch": epoch, "lr": lr, "loss": loss})
            ep_losses.append(loss)
            k += 1
            if tcfg.max_batches is not None and k >= tcfg.max_batches:
                done = True
                break
        enc.set_mode("eval")
        metrics = evaluate(enc, val)
        hist.epochs.append({"epoch": epoch, "train_loss": float(np.mean(ep_losses)),
                            "val_accuracy": metrics["accuracy"], "val_macro_f1": metrics["macro_f1"]})
        if progress:
            log.info("epoch %d loss %.4f val acc %.4f f1 %.4f", epoch, np.mean(ep_losses),
                     metrics["accuracy"], metrics["macro_f1"])
        if metrics["macro_f1"] > best_f1:
            best_f1, best = metrics["macro_f1"], enc.snapshot()
            hist.best_epoch = epoch
        if done:
            break
    enc.restore(best)
    return enc, hist

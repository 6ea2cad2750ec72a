"""Finite-difference checks for every differentiable piece of the model.

Each check builds a tiny problem, registers inputs next to the weights in
one :class:`ParamStore` so input gradients are probed too, and compares
the hand-written backward pass with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from . import cells as C
from .data import TimeSeries
from .model import ModelConfig, SequenceEncoder, backward_batch, forward_batch, make_batch
from .node import DynamicsNet, SolveConfig
from .tensorcore import (
    BatchNormState,
    GradCheckReport,
    ParamStore,
    affine,
    affine_backward,
    batchnorm,
    batchnorm_backward,
    grad_check,
    softmax,
)
from .train import batch_cross_entropy


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    seconds: float


def _weighted(out, w):
    # a random linear readout makes every output entry matter
    return float(np.sum(out * w))


def check_affine(rng, tol):
    P = ParamStore()
    P.add("x", rng.standard_normal((3, 4)))
    P.add("W", rng.standard_normal((2, 4)))
    P.add("b", rng.standard_normal(2))
    w = rng.standard_normal((3, 2))

    def loss(P):
        y = affine(P["x"], P["W"], P["b"])
        dx, dW, db = affine_backward(w, P["x"], P["W"])
        P.accumulate({"x": dx, "W": dW, "b": db})
        return _weighted(y, w)

    return grad_check(loss, P, tol)


def check_softmax_ce(rng, tol):
    P = ParamStore()
    P.add("z", rng.standard_normal((4, 3)))
    labels = np.array([0, 2, 1, 2])

    def loss(P):
        p = softmax(P["z"])
        onehot = np.zeros_like(p)
        onehot[np.arange(4), labels] = 1.0
        P.accumulate({"z": (p - onehot) / 4})
        return batch_cross_entropy(p, labels)

    return grad_check(loss, P, tol)


def check_batchnorm(rng, tol, mode):
    P = ParamStore()
    P.add("x", rng.standard_normal((5, 3)))
    P.add("gamma", 1.0 + 0.1 * rng.standard_normal(3))
    P.add("beta", 0.1 * rng.standard_normal(3))
    state = BatchNormState(P["gamma"], P["beta"], 0.2 * np.ones(3), 1.3 * np.ones(3), mode=mode)
    w = rng.standard_normal((5, 3))

    def loss(P):
        y, cache = batchnorm(P["x"], state, update_running=False)
        dx, dg, db = batchnorm_backward(w, cache, state)
        P.accumulate({"x": dx, "gamma": dg, "beta": db})
        return _weighted(y, w)

    return grad_check(loss, P, tol)


def check_cell(rng, tol, kind, depth=1):
    P = ParamStore()
    p = C.init_cell_params(kind, 3, 4, rng, P, depth=depth, width=5 if depth == 2 else None)
    P.add("x", rng.standard_normal((2, 3)))
    P.add("h", rng.standard_normal((2, 4)))
    if kind == "lstm":
        P.add("c", rng.standard_normal((2, 4)))
    wh = rng.standard_normal((2, 4))
    wc = rng.standard_normal((2, 4))

    def loss(P):
        if kind == "lstm":
            (h, c), cache = C.lstm_forward(P["x"], P["h"], P["c"], p)
            dx, dh, dc, g = C.lstm_backward(cache, wh, wc, p)
            P.accumulate({**g, "x": dx, "h": dh, "c": dc})
            return _weighted(h, wh) + _weighted(c, wc)
        fwd, bwd = (C.gru_forward, C.gru_backward) if kind == "gru" else (C.rnn_tanh_forward, C.rnn_tanh_backward)
        h, cache = fwd(P["x"], P["h"], p)
        dx, dh, g = bwd(cache, wh, p)
        P.accumulate({**g, "x": dx, "h": dh})
        return _weighted(h, wh)

    return grad_check(loss, P, tol)


def check_dynamics(rng, tol, time_input=False):
    P = ParamStore()
    net = DynamicsNet.create(4, 6, rng, P, time_input=time_input, time_scale=0.1)
    P.add("h", rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))

    def loss(P):
        f, cache = net.forward(P["h"], t=2.0)
        dh, g = net.backward(cache, w)
        P.accumulate({**g, "h": dh})
        return _weighted(f, w)

    return grad_check(loss, P, tol)


def toy_series(rng, d=3) -> List[TimeSeries]:
    """A few short series; the first has three observations."""
    spec = [([0, 2, 5], 1), ([1, 3], 0), ([0, 1, 4, 6], 2), ([2], 1)]
    return [TimeSeries(f"g{i}", ts, rng.standard_normal((len(ts), d)), lab, 6)
            for i, (ts, lab) in enumerate(spec)]


def check_model(rng, tol, cell, ode, time_features, train, gating_depth=1, mode="discrete"):
    cfg = ModelConfig(cell=cell, hidden_dim=4, f_theta_units=5, ode_enabled=ode,
                      time_features=time_features, num_classes=3, feature_dim=3, seed=3,
                      solve=SolveConfig(2, mode), init_sigma=0.1, gating_depth=gating_depth)
    enc = SequenceEncoder(cfg)
    enc.bn_upd.base.running_mean[:] = 0.1
    enc.bn_upd.base.running_var[:] = 1.5
    series = toy_series(rng)
    batch = make_batch(series if train else series[:1], enc)

    def loss(P):
        f = forward_batch(enc, batch, train=train, update_stats=False)
        onehot = np.zeros_like(f.probs)
        onehot[np.arange(len(batch)), batch.labels] = 1.0
        backward_batch(enc, f, (f.probs - onehot) / len(batch))
        return batch_cross_entropy(f.probs, batch.labels)

    return grad_check(loss, enc.params, tol)


def suite(tol: float = 1e-4, seed: int = 0) -> List[Tuple[str, Callable[[], GradCheckReport]]]:
    """Named zero-argument checks covering every layer type and the full model."""
    rng = np.random.default_rng(seed)
    checks = [
        ("affine", lambda: check_affine(rng, tol)),
        ("softmax+ce", lambda: check_softmax_ce(rng, tol)),
        ("batchnorm/train", lambda: check_batchnorm(rng, tol, "train")),
        ("batchnorm/eval", lambda: check_batchnorm(rng, tol, "eval")),
        ("f_theta", lambda: check_dynamics(rng, tol)),
        ("f_theta/time", lambda: check_dynamics(rng, tol, time_input=True)),
    ]
    for kind in C.GATES:
        checks.append((f"cell/{kind}", lambda k=kind: check_cell(rng, tol, k)))
        checks.append((f"cell/{kind}/depth2", lambda k=kind: check_cell(rng, tol, k, depth=2)))
    for cell in C.GATES:
        for ode in (True, False):
            for tf in ("none", "delta_t", "pe"):
                for train in (False, True):
                    name = f"model/{cell}/{'ode' if ode else 'rnn'}/{tf}/{'train' if train else 'eval'}"
                    checks.append((name, lambda c=cell, o=ode, t=tf, tr=train: check_model(rng, tol, c, o, t, tr)))
    checks.append(("model/gru/ode/depth2", lambda: check_model(rng, tol, "gru", True, "none", True, gating_depth=2)))
    return checks


def run_suite(tol: float = 1e-4, seed: int = 0) -> List[CheckResult]:
    out = []
    for name, fn in suite(tol, seed):
        t0 = time.perf_counter()
        rep = fn()
        out.append(CheckResult(name, rep, time.perf_counter() - t0))
    return out

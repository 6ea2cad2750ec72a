"""Hidden-state dynamics, the explicit Euler solver and its gradients.

A dynamics object maps a state ``h`` (shape ``(H,)`` or ``(B, H)``) to its
time derivative. It exposes ``forward(h, t) -> (f, cache)`` and
``backward(cache, df) -> (dh, grads)`` so that both gradient modes can be
written once for any field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, DimensionError, NumericDivergenceError, OrderingError, StateError
from .tensorcore import DTYPE, ParamStore, uniform_init

DIVERGENCE_BOUND = 1e6


@dataclass
class SolveConfig:
    steps_multiplier: int = 1
    gradient_mode: str = "discrete"

    def __post_init__(self):
        if int(self.steps_multiplier) != self.steps_multiplier or self.steps_multiplier < 1:
            raise ConfigError("steps_multiplier must be a positive integer")
        self.steps_multiplier = int(self.steps_multiplier)
        if self.gradient_mode not in ("discrete", "adjoint"):
            raise ConfigError(f"unknown gradient mode {self.gradient_mode!r}")


class DynamicsNet:
    """Two-layer tanh MLP ``f(h) = W2 @ tanh(W1 @ h + b1) + b2``.

    With ``time_input`` the first layer also sees ``t * time_scale`` as an
    extra trailing input.
    """

    def __init__(self, store: ParamStore, hidden: int, units: int,
                 prefix: str = "ode", time_input: bool = False, time_scale: float = 1.0):
        self.store = store
        self.hidden = hidden
        self.units = units
        self.prefix = prefix
        self.time_input = time_input
        self.time_scale = time_scale

    @classmethod
    def create(cls, hidden: int, units: int, rng: np.random.Generator,
               store: Optional[ParamStore] = None, **kw) -> "DynamicsNet":
        store = store if store is not None else ParamStore()
        net = cls(store, hidden, units, **kw)
        n_in = hidden + (1 if net.time_input else 0)
        store.add(net.key("W1"), uniform_init(rng, (units, n_in)))
        store.add(net.key("b1"), np.zeros(units))
        store.add(net.key("W2"), uniform_init(rng, (hidden, units)))
        store.add(net.key("b2"), np.zeros(hidden))
        return net

    def key(self, sym):
        return f"{self.prefix}.{sym}"

    def __getitem__(self, sym):
        return self.store[self.key(sym)]

    def forward(self, h, t=0.0):
        h = np.asarray(h, dtype=DTYPE)
        if h.shape[-1] != self.hidden:
            raise DimensionError(f"state dim {h.shape[-1]} != {self.hidden}")
        inp = h
        if self.time_input:
            tcol = np.full(h.shape[:-1] + (1,), t * self.time_scale)
            inp = np.concatenate([h, tcol], axis=-1)
        a = np.tanh(inp @ self["W1"].T + self["b1"])
        return a @ self["W2"].T + self["b2"], (inp, a)

    def __call__(self, h, t=0.0):
        return self.forward(h, t)[0]

    def backward(self, cache, df):
        inp, a = cache
        df = np.asarray(df, dtype=DTYPE)
        sum_ = (lambda g: g) if df.ndim == 1 else (lambda g: g.sum(axis=0))
        outer = np.outer if df.ndim == 1 else (lambda u, v: u.T @ v)
        grads = {self.key("W2"): outer(df, a), self.key("b2"): sum_(df)}
        da = (df @ self["W2"]) * (1.0 - a * a)
        grads[self.key("W1")] = outer(da, inp)
        grads[self.key("b1")] = sum_(da)
        dinp = da @ self["W1"]
        if self.time_input:
            dinp = dinp[..., : self.hidden]
        return dinp, grads


class LinearField:
    """``f(h) = A @ h``; a closed-form test problem for the solver."""

    def __init__(self, A, store: Optional[ParamStore] = None, prefix: str = "lin"):
        self.store = store if store is not None else ParamStore()
        self.prefix = prefix
        A = np.atleast_2d(np.asarray(A, dtype=DTYPE))
        self.store.add(f"{prefix}.A", A)
        self.hidden = A.shape[0]

    @property
    def A(self):
        return self.store[f"{self.prefix}.A"]

    def forward(self, h, t=0.0):
        h = np.asarray(h, dtype=DTYPE)
        return h @ self.A.T, h

    def __call__(self, h, t=0.0):
        return self.forward(h, t)[0]

    def backward(self, cache, df):
        h = cache
        dA = np.outer(df, h) if np.ndim(df) == 1 else df.T @ h
        return df @ self.A, {f"{self.prefix}.A": dA}


def f_theta(h, net: DynamicsNet, t=0.0):
    return net(h, t)


def steps_for_gap(t_prev, t_next, cfg: SolveConfig = SolveConfig()) -> int:
    """Euler steps between two observation times: one per time unit."""
    if t_next <= t_prev:
        raise OrderingError(f"t_next={t_next} must exceed t_prev={t_prev}")
    return int(round((t_next - t_prev) * cfg.steps_multiplier))


def steps_per_update(missing_rate: float) -> float:
    """Expected solver steps per observation at a given missing rate.

    With one step per time unit and each time unit observed with
    probability ``1 - missing_rate``, gaps average ``1 / (1 - missing_rate)``.
    """
    if not 0 <= missing_rate < 1:
        raise ValueError("missing_rate must lie in [0, 1)")
    return 1.0 / (1.0 - missing_rate)


@dataclass
class EulerTrace:
    """Forward record kept for discrete backpropagation."""

    t0: float
    dt: float
    caches: List = field(default_factory=list)
    final: Optional[np.ndarray] = None


def euler_solve(net, h0, t0: float, t1: float, n: int, keep_states: bool = False):
    """Integrate ``dh/dt = net(h, t)`` from ``t0`` to ``t1`` in ``n`` steps.

    Returns ``h(t1)``, or ``(h(t1), EulerTrace)`` when ``keep_states``.
    """
    if not t1 > t0:
        raise OrderingError(f"t1={t1} must exceed t0={t0}")
    if n < 1:
        raise ValueError("n must be >= 1")
    dt = (t1 - t0) / n
    h = np.asarray(h0, dtype=DTYPE)
    trace = EulerTrace(t0, dt) if keep_states else None
    for k in range(n):
        f, cache = net.forward(h, t0 + k * dt)
        h = h + dt * f
        if not np.all(np.abs(h) <= DIVERGENCE_BOUND):
            raise NumericDivergenceError(f"Euler state left |h| <= {DIVERGENCE_BOUND:g} at step {k + 1}/{n}")
        if keep_states:
            trace.caches.append(cache)
    if keep_states:
        trace.final = h
        return h, trace
    return h


def _add(total: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
    for k, g in grads.items():
        if k in total:
            total[k] = total[k] + g
        else:
            total[k] = g


def ode_gradients(net, h0, t0: float, t1: float, n: int, dl_dh1, mode: str = "discrete",
                  trace: Optional[EulerTrace] = None, h1=None):
    """Backpropagate ``dL/dh(t1)`` through an Euler solve.

    ``discrete`` replays the stored forward steps in reverse and is exact
    for the discretized map. ``adjoint`` integrates the adjoint state
    ``a`` and the parameter gradient backward in time with Euler, using
    the same ``n``, rebuilding ``h`` from ``h(t1)`` by reverse steps.

    Returns ``(dL/dh0, {param_name: grad})``.
    """
    if not t1 > t0:
        raise OrderingError(f"t1={t1} must exceed t0={t0}")
    dt = (t1 - t0) / n
    a = np.asarray(dl_dh1, dtype=DTYPE)
    total: Dict[str, np.ndarray] = {}
    if mode == "discrete":
        if trace is None or len(trace.caches) != n:
            raise StateError("discrete gradients need the trace of a matching forward solve")
        for cache in reversed(trace.caches):
            dh, grads = net.backward(cache, dt * a)
            a = a + dh
            _add(total, grads)
        return a, total
    if mode != "adjoint":
        raise ConfigError(f"unknown gradient mode {mode!r}")
    if h1 is None:
        h1 = trace.final if trace is not None else euler_solve(net, h0, t0, t1, n)
    h = np.asarray(h1, dtype=DTYPE)
    for k in range(n, 0, -1):
        f, cache = net.forward(h, t0 + k * dt)
        dh, grads = net.backward(cache, dt * a)
        a = a + dh
        _add(total, grads)
        h = h - dt * f
    return a, total

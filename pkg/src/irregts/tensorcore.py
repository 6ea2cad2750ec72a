"""Dense arithmetic building blocks with hand-written backward passes.

Everything here works on float64 numpy arrays. Functions that take a
batch accept either a single vector of shape ``(n,)`` or a stack of
vectors of shape ``(B, n)``; reductions for parameter gradients sum over
the leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, Optional

import numpy as np

from .errors import DimensionError, EmptyBatchError, NumericError

DTYPE = np.float64


class ParamStore:
    """Named parameter tensors, each paired with a gradient buffer.

    Values are updated in place by the optimizer, so other objects may
    hold references to the arrays returned by ``store[name]``.
    """

    def __init__(self):
        self._values: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, values) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(values, dtype=DTYPE, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter {name!r} has non-finite values")
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self, prefix: str = "") -> list:
        return [n for n in self._values if n.startswith(prefix)]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def accumulate(self, grads: Dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            buf = self._grads[name]
            if g.shape != buf.shape:
                raise DimensionError(f"gradient for {name!r} has shape {g.shape}, expected {buf.shape}")
            buf += g

    def assign(self, name: str, values) -> None:
        """Overwrite a parameter in place, keeping outside references valid."""
        arr = np.asarray(values, dtype=DTYPE)
        if arr.shape != self._values[name].shape:
            raise DimensionError(f"cannot assign shape {arr.shape} to {name!r} {self._values[name].shape}")
        self._values[name][...] = arr

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self._values.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._values) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, v in state.items():
            self.assign(name, v)


def uniform_init(rng: np.random.Generator, shape) -> np.ndarray:
    """U(-s, s) with s = 1/sqrt(fan_in); fan_in is the last axis."""
    s = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-s, s, size=shape)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def affine(x, W, b):
    """Return ``W @ x + b`` for a vector or a row-stacked batch ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: x{x.shape}, W{W.shape}, b{b.shape} do not conform")
    if not np.all(np.isfinite(x)):
        raise NumericError("affine: non-finite input")
    return x @ W.T + b


def affine_backward(dy, x, W):
    """Gradients of ``affine`` given the upstream gradient ``dy``.

    Returns ``(dx, dW, db)``; ``dW`` and ``db`` are summed over the batch.
    """
    dy = np.asarray(dy, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    dx = dy @ W
    if dy.ndim == 1:
        return dx, np.outer(dy, x), dy.copy()
    return dx, dy.T @ x, dy.sum(axis=0)


def softmax(z):
    z = np.asarray(z, dtype=DTYPE)
    if z.size == 0 or z.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax: non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp, p):
    """Vector-Jacobian product of softmax at output ``p``."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


@dataclass
class BatchNormState:
    """Per-feature normalization with learnable scale/shift.

    ``gamma`` and ``beta`` are usually views into a ``ParamStore`` so that
    optimizer updates are seen here without copying.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"unknown batchnorm mode {self.mode!r}")

    @classmethod
    def fresh(cls, size: int, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(size),
            beta=np.zeros(size),
            running_mean=np.zeros(size),
            running_var=np.ones(size),
            **kw,
        )


@dataclass
class _BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    batch_stats: bool


def batchnorm(batch, state: BatchNormState, update_running: bool = True, mode: Optional[str] = None):
    """Normalize a ``(B, H)`` batch. Returns ``(out, cache)``.

    In train mode the batch mean and population variance are used and the
    running statistics are moved toward them (unless ``update_running`` is
    false). In eval mode the running statistics are used.
    """
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != 2:
        x = np.atleast_2d(x)
    if x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(f"batchnorm: feature dim {x.shape[1]} != {state.gamma.shape[0]}")
    mode = mode or state.mode
    if mode == "train":
        if x.shape[0] == 0:
            raise EmptyBatchError("batchnorm in train mode needs a nonempty batch")
        mu = x.mean(axis=0)
        var = ((x - mu) ** 2).mean(axis=0)
        if update_running:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mu
            state.running_var[...] = (1 - m) * state.running_var + m * var
        batch_stats = True
    else:
        mu, var = state.running_mean, state.running_var
        batch_stats = False
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mu) * inv_std
    return state.gamma * xhat + state.beta, _BNCache(xhat, inv_std, batch_stats)


def batchnorm_backward(dout, cache: _BNCache, state: BatchNormState):
    """Returns ``(dx, dgamma, dbeta)``."""
    dout = np.atleast_2d(np.asarray(dout, dtype=DTYPE))
    xhat = cache.xhat
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * state.gamma
    if not cache.batch_stats:
        return dxhat * cache.inv_std, dgamma, dbeta
    n = dout.shape[0]
    dx = (cache.inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
    )
    return dx, dgamma, dbeta


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    worst: Optional[str] = None
    per_param: Dict[str, float] = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.tol:.0e}, worst {self.worst})"


def grad_check(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    tol: float = 1e-6,
    names: Optional[Iterable[str]] = None,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params)`` must run the forward *and* backward pass, leaving
    the analytic gradient in the store's grad buffers, and return the
    scalar loss. Buffers are zeroed before the analytic call.

    The relative error of one entry is ``|a - n| / max(1, |a|, |n|)``. The
    step is ``cbrt(eps) * max(1, |value|)``. ``max_entries`` limits how many
    entries per tensor are probed (chosen with ``rng``).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    names = list(names) if names is not None else list(params)
    rng = rng or np.random.default_rng(0)

    params.zero_grad()
    loss0 = loss_fn(params)
    if not np.isfinite(loss0):
        raise NumericError(f"loss is not finite: {loss0}")
    analytic = {n: params.grad(n).copy() for n in names}

    base = np.cbrt(np.finfo(DTYPE).eps)
    worst_err, worst_name = 0.0, None
    per_param = {}
    for name in names:
        values = params[name]
        flat = values.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        err_p = 0.0
        for i in idx:
            orig = flat[i]
            h = base * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = loss_fn(params)
            flat[i] = orig - h
            lm = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"loss not finite while perturbing {name}[{i}]")
            num = (lp - lm) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            err_p = max(err_p, err)
        per_param[name] = err_p
        if err_p >= worst_err:
            worst_err, worst_name = err_p, name

    # restore the analytic buffers so callers can inspect them
    params.zero_grad()
    params.accumulate(analytic)
    return GradCheckReport(worst_err, worst_err < tol, tol, worst_name, per_param)

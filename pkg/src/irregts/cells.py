"""Recurrent update cells: plain tanh RNN, LSTM and GRU.

Parameter names follow the usual gate symbols: ``W_x<g>`` multiplies the
input, ``W_h<g>`` the previous hidden state and ``b_<g>`` is the bias of
gate ``g``. LSTM gates are ``i, f, o, z``; GRU gates are ``f, r, z`` where
``f`` interpolates between the old state and the candidate ``z``.

With ``depth=2`` each gate pre-activation passes through one extra hidden
layer: ``pre = W_<g>2 @ tanh(W_x<g> x + W_h<g> h + b_<g>) + b_<g>2``.

The ``*_forward`` functions take row-stacked batches and return
``(output, cache)``; the matching ``*_backward`` return input gradients
and a dict of parameter gradients. The ``*_step`` functions are the
single-call convenience versions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .errors import DimensionError, StateError
from .tensorcore import DTYPE, ParamStore, sigmoid, uniform_init

GATES = {"tanh": ("",), "lstm": ("i", "f", "o", "z"), "gru": ("f", "r", "z")}


def _bias_name(g):
    return "b" if g == "" else f"b_{g}"


def _second(g, what):
    return f"{what}_{g}2" if g else f"{what}2"


class CellParams:
    """View onto the cell entries of a ParamStore."""

    def __init__(self, kind: str, store: ParamStore, d_in: int, hidden: int,
                 prefix: str = "cell", depth: int = 1, width: Optional[int] = None):
        if kind not in GATES:
            raise ValueError(f"unknown cell type {kind!r}")
        if depth not in (1, 2):
            raise ValueError("gating depth must be 1 or 2")
        self.kind = kind
        self.store = store
        self.d_in = d_in
        self.hidden = hidden
        self.prefix = prefix
        self.depth = depth
        self.width = width or hidden

    def key(self, sym: str) -> str:
        return f"{self.prefix}.{sym}"

    def __getitem__(self, sym: str) -> np.ndarray:
        return self.store[self.key(sym)]

    @property
    def gates(self):
        return GATES[self.kind]

    def symbols(self):
        out = []
        for g in self.gates:
            out += [f"W_x{g}", f"W_h{g}", _bias_name(g)]
            if self.depth == 2:
                out += [_second(g, "W"), _second(g, "b")]
        return out


def init_cell_params(kind: str, d_in: int, hidden: int, rng: np.random.Generator,
                     store: Optional[ParamStore] = None, prefix: str = "cell",
                     depth: int = 1, width: Optional[int] = None) -> CellParams:
    store = store if store is not None else ParamStore()
    p = CellParams(kind, store, d_in, hidden, prefix, depth, width)
    inner = p.width if depth == 2 else hidden
    for g in p.gates:
        store.add(p.key(f"W_x{g}"), uniform_init(rng, (inner, d_in)))
        store.add(p.key(f"W_h{g}"), uniform_init(rng, (inner, hidden)))
        store.add(p.key(_bias_name(g)), np.zeros(inner))
        if depth == 2:
            store.add(p.key(_second(g, "W")), uniform_init(rng, (hidden, inner)))
            store.add(p.key(_second(g, "b")), np.zeros(hidden))
    return p


def zero_cell_params(kind: str, d_in: int, hidden: int, **kw) -> CellParams:
    """All-zero parameters; handy for closed-form checks."""
    p = init_cell_params(kind, d_in, hidden, np.random.default_rng(0), **kw)
    for sym in p.symbols():
        p[sym].fill(0.0)
    return p


@dataclass
class CellState:
    h: np.ndarray
    c: Optional[np.ndarray] = None


def _check(x, h, p: CellParams):
    if x.shape[-1] != p.d_in:
        raise DimensionError(f"input dim {x.shape[-1]} != {p.d_in}")
    if h.shape[-1] != p.hidden:
        raise DimensionError(f"hidden dim {h.shape[-1]} != {p.hidden}")
    if x.shape[:-1] != h.shape[:-1]:
        raise DimensionError(f"batch shapes differ: {x.shape} vs {h.shape}")


def _gate(p: CellParams, g: str, x, hin):
    pre = x @ p[f"W_x{g}"].T + hin @ p[f"W_h{g}"].T + p[_bias_name(g)]
    if p.depth == 1:
        return pre, (x, hin, None)
    a = np.tanh(pre)
    return a @ p[_second(g, "W")].T + p[_second(g, "b")], (x, hin, a)


def _gate_backward(p: CellParams, g: str, cache, dpre, grads: Dict[str, np.ndarray]):
    x, hin, a = cache
    if a is not None:
        grads[p.key(_second(g, "W"))] = dpre.T @ a
        grads[p.key(_second(g, "b"))] = dpre.sum(axis=0)
        dpre = (dpre @ p[_second(g, "W")]) * (1.0 - a * a)
    grads[p.key(f"W_x{g}")] = dpre.T @ x
    grads[p.key(f"W_h{g}")] = dpre.T @ hin
    grads[p.key(_bias_name(g))] = dpre.sum(axis=0)
    return dpre @ p[f"W_x{g}"], dpre @ p[f"W_h{g}"]


# -- tanh RNN ---------------------------------------------------------------

def rnn_tanh_forward(x, h_prev, p: CellParams):
    _check(x, h_prev, p)
    pre, gc = _gate(p, "", x, h_prev)
    h = np.tanh(pre)
    return h, (gc, h)


def rnn_tanh_backward(cache, dh, p: CellParams):
    gc, h = cache
    grads = {}
    dx, dh_prev = _gate_backward(p, "", gc, dh * (1.0 - h * h), grads)
    return dx, dh_prev, grads


# -- LSTM -------------------------------------------------------------------

def lstm_forward(x, h_prev, c_prev, p: CellParams):
    _check(x, h_prev, p)
    pi, ci = _gate(p, "i", x, h_prev)
    pf, cf = _gate(p, "f", x, h_prev)
    po, co = _gate(p, "o", x, h_prev)
    pz, cz = _gate(p, "z", x, h_prev)
    i, f, o, z = sigmoid(pi), sigmoid(pf), sigmoid(po), np.tanh(pz)
    c = f * c_prev + i * z
    tc = np.tanh(c)
    h = o * tc
    return (h, c), (ci, cf, co, cz, i, f, o, z, c_prev, tc)


def lstm_backward(cache, dh, dc, p: CellParams):
    """Returns ``(dx, dh_prev, dc_prev, grads)``."""
    ci, cf, co, cz, i, f, o, z, c_prev, tc = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    do = dh * tc
    df = dc * c_prev
    di = dc * z
    dz = dc * i
    dc_prev = dc * f
    grads = {}
    dx = 0.0
    dh_prev = 0.0
    for g, gc, dpre in (
        ("i", ci, di * i * (1.0 - i)),
        ("f", cf, df * f * (1.0 - f)),
        ("o", co, do * o * (1.0 - o)),
        ("z", cz, dz * (1.0 - z * z)),
    ):
        a, b = _gate_backward(p, g, gc, dpre, grads)
        dx = dx + a
        dh_prev = dh_prev + b
    return dx, dh_prev, dc_prev, grads


# -- GRU --------------------------------------------------------------------

def gru_forward(x, h_prev, p: CellParams):
    _check(x, h_prev, p)
    pf, cf = _gate(p, "f", x, h_prev)
    pr, cr = _gate(p, "r", x, h_prev)
    f, r = sigmoid(pf), sigmoid(pr)
    pz, cz = _gate(p, "z", x, r * h_prev)
    z = np.tanh(pz)
    h = f * h_prev + (1.0 - f) * z
    return h, (cf, cr, cz, f, r, z, h_prev)


def gru_backward(cache, dh, p: CellParams):
    cf, cr, cz, f, r, z, h_prev = cache
    grads = {}
    dz = dh * (1.0 - f)
    df = dh * (h_prev - z)
    dh_prev = dh * f
    dx, drh = _gate_backward(p, "z", cz, dz * (1.0 - z * z), grads)
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    a, b = _gate_backward(p, "r", cr, dr * r * (1.0 - r), grads)
    dx, dh_prev = dx + a, dh_prev + b
    a, b = _gate_backward(p, "f", cf, df * f * (1.0 - f), grads)
    return dx + a, dh_prev + b, grads


# -- single-call wrappers ---------------------------------------------------

def _as2d(v):
    v = np.asarray(v, dtype=DTYPE)
    return v[None, :] if v.ndim == 1 else v


def _like(out, ref):
    return out[0] if np.ndim(ref) == 1 else out


def rnn_tanh_step(x, h_prev, p: CellParams):
    h, _ = rnn_tanh_forward(_as2d(x), _as2d(h_prev), p)
    return _like(h, h_prev)


def lstm_step(x, s_prev: CellState, p: CellParams) -> CellState:
    if s_prev.c is None:
        raise StateError("LSTM step needs a cell state c")
    (h, c), _ = lstm_forward(_as2d(x), _as2d(s_prev.h), _as2d(s_prev.c), p)
    return CellState(_like(h, s_prev.h), _like(c, s_prev.c))


def gru_step(x, h_prev, p: CellParams):
    h, _ = gru_forward(_as2d(x), _as2d(h_prev), p)
    return _like(h, h_prev)


def gate_activations(x, h_prev, p: CellParams) -> Dict[str, np.ndarray]:
    """Gate values for one step, for inspection and property tests."""
    x, h_prev = _as2d(x), _as2d(h_prev)
    _check(x, h_prev, p)
    if p.kind == "tanh":
        return {}
    out = {}
    if p.kind == "lstm":
        for g in ("i", "f", "o"):
            out[g] = sigmoid(_gate(p, g, x, h_prev)[0])
        out["z"] = np.tanh(_gate(p, "z", x, h_prev)[0])
    else:
        out["f"] = sigmoid(_gate(p, "f", x, h_prev)[0])
        out["r"] = sigmoid(_gate(p, "r", x, h_prev)[0])
        out["z"] = np.tanh(_gate(p, "z", x, out["r"] * h_prev)[0])
    return out

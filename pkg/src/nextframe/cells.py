"""LSTM and ConvLSTM cells with exact backward passes, and a BPTT unroller.

Gate order everywhere is (i, f, g, o). Gates i, f, o use the sigmoid, the
candidate g and the cell-output squash use tanh; there are no peepholes.
Inputs may carry a leading batch axis: LSTM inputs are ``(..., input)``,
ConvLSTM inputs are ``(C, H, W)`` or ``(B, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import ShapeError, conv2d, conv2d_grad, elementwise

GATES = ("i", "f", "g", "o")


@dataclass
class LstmParams:
    W: np.ndarray  # (4, hidden, input)
    R: np.ndarray  # (4, hidden, hidden)
    b: np.ndarray  # (4, hidden)

    def __post_init__(self):
        if self.W.ndim != 3 or self.W.shape[0] != 4:
            raise ShapeError(f"W must be 4×hidden×input, got {self.W.shape}")
        hidden = self.W.shape[1]
        if self.R.shape != (4, hidden, hidden) or self.b.shape != (4, hidden):
            raise ShapeError(f"inconsistent LSTM params W{self.W.shape} R{self.R.shape} b{self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.W.shape[1]

    @property
    def input(self) -> int:
        return self.W.shape[2]

    @classmethod
    def zeros(cls, hidden, input, dtype=np.float32):
        return cls(np.zeros((4, hidden, input), dtype), np.zeros((4, hidden, hidden), dtype),
                   np.zeros((4, hidden), dtype))

    def as_dict(self):
        return {"W": self.W, "R": self.R, "b": self.b}


for _k, _g in enumerate(GATES):
    for _field in ("W", "R", "b"):
        setattr(LstmParams, f"{_field}_{_g}",
                property(lambda self, f=_field, k=_k: getattr(self, f)[k]))


@dataclass
class ConvLstmParams:
    W: np.ndarray  # (4, hidden, in_channels, K, K)
    R: np.ndarray  # (4, hidden, hidden, K, K)
    b: np.ndarray  # (4, hidden)

    def __post_init__(self):
        if self.W.ndim != 5 or self.W.shape[0] != 4 or self.W.shape[3] != self.W.shape[4]:
            raise ShapeError(f"W must be 4×hidden×in×K×K, got {self.W.shape}")
        _, hidden, _, k, _ = self.W.shape
        if self.R.shape != (4, hidden, hidden, k, k) or self.b.shape != (4, hidden):
            raise ShapeError(f"inconsistent ConvLSTM params W{self.W.shape} R{self.R.shape} b{self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.W.shape[1]

    @property
    def input(self) -> int:
        return self.W.shape[2]

    @property
    def kernel(self) -> int:
        return self.W.shape[3]

    @classmethod
    def zeros(cls, hidden, in_channels, kernel=3, dtype=np.float32):
        return cls(np.zeros((4, hidden, in_channels, kernel, kernel), dtype),
                   np.zeros((4, hidden, hidden, kernel, kernel), dtype),
                   np.zeros((4, hidden), dtype))

    def as_dict(self):
        return {"W": self.W, "R": self.R, "b": self.b}


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


ConvLstmState = LstmState


class CellCache(NamedTuple):
    x: np.ndarray
    prev: LstmState
    params: LstmParams | ConvLstmParams
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


# ---------------------------------------------------------------- shared


def _pointwise(z_gates, prev, x, p):
    zi, zf, zg, zo = z_gates
    i = elementwise("sigmoid", zi)
    f = elementwise("sigmoid", zf)
    g = elementwise("tanh", zg)
    o = elementwise("sigmoid", zo)
    c = f * prev.c + i * g
    tanh_c = elementwise("tanh", c)
    h = o * tanh_c
    return LstmState(h, c), CellCache(x, prev, p, i, f, g, o, tanh_c)


def _pointwise_backward(cache, dh, dc):
    i, f, g, o, tc = cache.i, cache.f, cache.g, cache.o, cache.tanh_c
    dc = dc + dh * o * (1 - tc * tc)
    dzi = dc * g * i * (1 - i)
    dzf = dc * cache.prev.c * f * (1 - f)
    dzg = dc * i * (1 - g * g)
    dzo = dh * tc * o * (1 - o)
    return (dzi, dzf, dzg, dzo), dc * f


def _upstream(cache, dh, dc):
    h = cache.prev.h
    dh = np.zeros_like(h) if dh is None else dh
    dc = np.zeros_like(h) if dc is None else dc
    if dh.shape != h.shape or dc.shape != h.shape:
        raise ShapeError(f"upstream shapes {dh.shape}/{dc.shape} do not match state {h.shape}")
    return dh, dc


# ------------------------------------------------------------------ LSTM


def lstm_zero_state(x, p: LstmParams) -> LstmState:
    shape = x.shape[:-1] + (p.hidden,)
    return LstmState(np.zeros(shape, x.dtype), np.zeros(shape, x.dtype))


def lstm_cell_forward(x, prev: LstmState, p: LstmParams):
    if x.shape[-1] != p.input or prev.h.shape != x.shape[:-1] + (p.hidden,) or prev.c.shape != prev.h.shape:
        raise ShapeError(f"x{x.shape}, h{prev.h.shape}, c{prev.c.shape} inconsistent with "
                         f"hidden={p.hidden}, input={p.input}")
    hid = p.hidden
    z = x @ p.W.reshape(4 * hid, -1).T + prev.h @ p.R.reshape(4 * hid, hid).T + p.b.reshape(-1)
    gates = [z[..., k * hid:(k + 1) * hid] for k in range(4)]
    return _pointwise(gates, prev, x, p)


def lstm_cell_backward(cache: CellCache, dH=None, dC=None):
    """Gradients of ``sum(dH*h_t) + sum(dC*c_t)``.

    Returns ``(d_params, d_x, d_prev)`` with ``d_params`` an ``LstmParams``.
    """
    dh, dc = _upstream(cache, dH, dC)
    p = cache.params
    hid = p.hidden
    dz_gates, dc_prev = _pointwise_backward(cache, dh, dc)
    dz = np.concatenate(dz_gates, axis=-1)
    dz2 = dz.reshape(-1, 4 * hid)
    x2 = cache.x.reshape(-1, p.input)
    h2 = cache.prev.h.reshape(-1, hid)
    dW = (dz2.T @ x2).reshape(p.W.shape)
    dR = (dz2.T @ h2).reshape(p.R.shape)
    db = dz2.sum(axis=0).reshape(p.b.shape)
    dx = dz @ p.W.reshape(4 * hid, -1)
    dh_prev = dz @ p.R.reshape(4 * hid, hid)
    return LstmParams(dW, dR, db), dx, LstmState(dh_prev, dc_prev)


# -------------------------------------------------------------- ConvLSTM


def convlstm_zero_state(x, p: ConvLstmParams) -> LstmState:
    shape = x.shape[:-3] + (p.hidden,) + x.shape[-2:]
    return LstmState(np.zeros(shape, x.dtype), np.zeros(shape, x.dtype))


def _split_channels(z, hid):
    return [z[..., k * hid:(k + 1) * hid, :, :] for k in range(4)]


def convlstm_cell_forward(x, prev: LstmState, p: ConvLstmParams):
    if x.ndim not in (3, 4) or x.shape[-3] != p.input:
        raise ShapeError(f"frame {x.shape} inconsistent with {p.input} input channels")
    expect = x.shape[:-3] + (p.hidden,) + x.shape[-2:]
    if prev.h.shape != expect or prev.c.shape != expect:
        raise ShapeError(f"state h{prev.h.shape}/c{prev.c.shape} does not match expected {expect}")
    hid, k = p.hidden, p.kernel
    z = conv2d(x, p.W.reshape(4 * hid, p.input, k, k), p.b.reshape(-1), "same")
    z += conv2d(prev.h, p.R.reshape(4 * hid, hid, k, k), None, "same")
    return _pointwise(_split_channels(z, hid), prev, x, p)


def convlstm_cell_backward(cache: CellCache, dH=None, dC=None):
    dh, dc = _upstream(cache, dH, dC)
    p = cache.params
    hid, k = p.hidden, p.kernel
    dz_gates, dc_prev = _pointwise_backward(cache, dh, dc)
    dz = np.concatenate(dz_gates, axis=-3)
    dx, dW, db = conv2d_grad(cache.x, p.W.reshape(4 * hid, p.input, k, k), dz, "same")
    dh_prev, dR, _ = conv2d_grad(cache.prev.h, p.R.reshape(4 * hid, hid, k, k), dz, "same")
    grads = ConvLstmParams(dW.reshape(p.W.shape), dR.reshape(p.R.shape), db.reshape(p.b.shape))
    return grads, dx, LstmState(dh_prev, dc_prev)


# ---------------------------------------------------------------- unroll

_CELLS = {
    "lstm": (lstm_cell_forward, lstm_cell_backward, lstm_zero_state),
    "convlstm": (convlstm_cell_forward, convlstm_cell_backward, convlstm_zero_state),
}


def unroll(sequence, kind: str, params, init: LstmState | None = None):
    """Run a cell left to right over ``sequence``; returns ``(states, caches)``."""
    if len(sequence) == 0:
        raise ValueError("cannot unroll an empty sequence")
    forward, _, zero = _CELLS[kind]
    state = zero(sequence[0], params) if init is None else init
    states, caches = [], []
    for x in sequence:
        if x.shape != sequence[0].shape:
            raise ShapeError("sequence elements must share one shape")
        state, cache = forward(x, state, params)
        states.append(state)
        caches.append(cache)
    return states, caches


def unroll_backward(kind: str, caches, dh_seq=None, dc_last=None):
    """Backpropagation through time over a whole unrolled window.

    ``dh_seq`` holds the upstream gradient for each emitted ``h_t`` (entries may
    be None); ``dc_last`` is the upstream gradient on the final cell state.
    Returns ``(d_params, d_inputs, d_init_state)``, parameter gradients summed
    over all steps.
    """
    _, backward, _ = _CELLS[kind]
    n = len(caches)
    if dh_seq is None:
        dh_seq = [None] * n
    if len(dh_seq) != n:
        raise ShapeError(f"{len(dh_seq)} upstream gradients for {n} steps")
    like = caches[-1].prev.h
    dh_next = np.zeros_like(like)
    dc_next = np.zeros_like(like) if dc_last is None else dc_last
    total = None
    dxs = [None] * n
    for t in range(n - 1, -1, -1):
        dh = dh_next if dh_seq[t] is None else dh_seq[t] + dh_next
        grads, dxs[t], dprev = backward(caches[t], dh, dc_next)
        if total is None:
            total = grads
        else:
            total.W += grads.W
            total.R += grads.R
            total.b += grads.b
        dh_next, dc_next = dprev
    return total, dxs, LstmState(dh_next, dc_next)

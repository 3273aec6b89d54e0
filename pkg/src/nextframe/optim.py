"""Adam with bias correction, and the MAE / RMSE training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

LOSS_KINDS = ("mae", "rmse")


@dataclass
class AdamState:
    v: np.ndarray
    s: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eta: float = 1e-3
    eps: float = 1e-8

    @classmethod
    def like(cls, param, **hyper):
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Update ``param`` and ``state`` in place; returns ``param``."""
    if not (param.shape == grad.shape == state.v.shape == state.s.shape):
        raise ShapeError(f"param {param.shape}, grad {grad.shape}, moments {state.v.shape}/{state.s.shape} differ")
    if state.eta <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.v *= b1
    state.v += (1 - b1) * grad
    state.s *= b2
    state.s += (1 - b2) * grad * grad
    v_hat = state.v / (1 - b1 ** state.step)
    s_hat = state.s / (1 - b2 ** state.step)
    param -= (state.eta * v_hat / (np.sqrt(s_hat) + state.eps)).astype(param.dtype, copy=False)
    return param


def _residual(P, O):
    if P.shape != O.shape:
        raise ShapeError(f"prediction {P.shape} and observation {O.shape} differ")
    if P.size == 0:
        raise ShapeError("loss of empty tensors is undefined")
    return P.astype(np.float64) - O.astype(np.float64)


def loss(kind: str, P: np.ndarray, O: np.ndarray) -> float:
    r = _residual(P, O)
    if kind == "mae":
        return float(np.abs(r).mean())
    if kind == "rmse":
        return float(np.sqrt((r * r).mean()))
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_grad(kind: str, P: np.ndarray, O: np.ndarray) -> np.ndarray:
    """Derivative of ``loss(kind, P, O)`` with respect to ``P`` (dtype of P)."""
    r = _residual(P, O)
    n = r.size
    if kind == "mae":
        g = np.sign(r) / n
    elif kind == "rmse":
        value = np.sqrt((r * r).mean())
        g = np.zeros_like(r) if value < 1e-12 else r / (n * value)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return g.astype(P.dtype)

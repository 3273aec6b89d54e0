"""SSIM, prediction reports, and a central-difference gradient checker."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .optim import loss
from .tensor import ShapeError


@dataclass(frozen=True)
class SsimConsts:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


DEFAULT_CONSTS = SsimConsts()


def ssim(x: np.ndarray, y: np.ndarray, consts: SsimConsts = DEFAULT_CONSTS, window: int | None = None) -> float:
    """Structural similarity from whole-frame statistics.

    With ``window`` set, returns instead the mean SSIM over every
    window×window patch (stride 1, uniform weights).
    """
    if x.shape != y.shape:
        raise ShapeError(f"ssim of differently shaped frames {x.shape} vs {y.shape}")
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if window is not None:
        return _ssim_windowed(x, y, consts, window)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy, cov = (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean()
    c1, c2 = consts.c1, consts.c2
    return float((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def _ssim_windowed(x, y, consts, window):
    x2 = x.reshape(x.shape[0], x.shape[1], -1)[..., 0] if x.ndim == 3 else x
    y2 = y.reshape(y.shape[0], y.shape[1], -1)[..., 0] if y.ndim == 3 else y
    if x2.ndim != 2 or min(x2.shape) < window:
        raise ShapeError(f"windowed ssim needs an H×W frame at least {window} on a side")
    px = sliding_window_view(x2, (window, window)).reshape(-1, window * window)
    py = sliding_window_view(y2, (window, window)).reshape(-1, window * window)
    mx, my = px.mean(axis=1), py.mean(axis=1)
    vx = px.var(axis=1)
    vy = py.var(axis=1)
    cov = ((px - mx[:, None]) * (py - my[:, None])).mean(axis=1)
    c1, c2 = consts.c1, consts.c2
    s = (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


@dataclass
class EvalReport:
    rmse: float
    mae: float
    ssim: float
    per_frame: list[tuple[float, float, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        """One row per prediction, then an ``all`` aggregate row."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame_index", "rmse", "mae", "ssim"])
            for k, (r, m, s) in enumerate(self.per_frame):
                w.writerow([k, repr(r), repr(m), repr(s)])
            w.writerow(["all", repr(self.rmse), repr(self.mae), repr(self.ssim)])


def evaluate(pred: np.ndarray, truth: np.ndarray, consts: SsimConsts = DEFAULT_CONSTS) -> EvalReport:
    """Pooled RMSE/MAE over all pairs and mean per-pair SSIM.

    A single frame (H×W×1) or a stack of them (N×H×W×1) is accepted.
    """
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if pred.ndim == 3:
        pred, truth = pred[None], truth[None]
    per_frame = [(loss("rmse", p, t), loss("mae", p, t), ssim(p, t, consts)) for p, t in zip(pred, truth)]
    return EvalReport(
        rmse=loss("rmse", pred, truth),
        mae=loss("mae", pred, truth),
        ssim=float(np.mean([s for _, _, s in per_frame])),
        per_frame=per_frame,
    )


def finite_diff_check(f, p: np.ndarray, analytic: np.ndarray, step: float = 1e-3, floor: float = 1e-6,
                      atol: float | None = None, indices=None) -> float:
    """Max relative error between ``analytic`` and central differences of ``f`` at ``p``.

    ``p`` is perturbed in place and restored. The error per coordinate is
    ``|fd - analytic| / max(|fd|, |analytic|, floor)``. When ``atol`` is given,
    coordinates whose absolute disagreement is at most ``atol`` score zero;
    this keeps the O(step**2) truncation error on near-zero gradients from
    dominating the maximum. ``indices`` restricts the check to a subset of
    flat coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if analytic.shape != p.shape:
        raise ShapeError(f"analytic gradient {analytic.shape} does not match parameter {p.shape}")
    flat = p.reshape(-1)
    if not np.shares_memory(flat, p):
        raise ValueError("parameter must be contiguous so it can be perturbed in place")
    an = analytic.reshape(-1)
    worst = 0.0
    for k in range(flat.size) if indices is None else indices:
        k = int(k)
        orig = flat[k]
        flat[k] = orig + step
        up = float(f(p))
        flat[k] = orig - step
        down = float(f(p))
        flat[k] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite objective at coordinate {k}")
        fd = (up - down) / (2 * step)
        diff = abs(fd - an[k])
        if atol is not None and diff <= atol:
            continue
        err = diff / max(abs(fd), abs(an[k]), floor)
        worst = max(worst, err)
    return worst

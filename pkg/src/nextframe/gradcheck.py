"""Finite-difference verification of every analytic gradient in the package.

Each check draws random float64 instances, builds a scalar objective
``sum(output * upstream)`` around the op, and compares the analytic gradient
of every argument with central differences. Run all of them with
``run_suite()`` or ``nextframe gradcheck``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import cells
from .layers import BatchNormParams, DenseParams, batchnorm_backward, batchnorm_forward, dense_backward, dense_forward
from .metrics import finite_diff_check
from .model import ModelConfig, build_model
from .optim import loss, loss_grad
from .tensor import conv2d, conv2d_grad, maxpool2d, maxpool2d_backward

STEP = 1e-3
OP_TOL = 1e-4
E2E_TOL = 1e-3
E2E_STEP = 1e-5
ATOL = 1e-6  # per-op checks skip coordinates whose absolute error is at most this


@dataclass
class CheckResult:
    name: str
    instances: int
    worst: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name:<16} instances={self.instances:<3d} max_rel_err={self.worst:.3e} "
                f"tol={self.tolerance:.0e} ({self.seconds:.2f}s)")


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _worst(pairs, step=STEP):
    return max(finite_diff_check(f, p, g, step, atol=ATOL) for f, p, g in pairs)


def check_dense(rng):
    act = rng.choice(["none", "relu", "sigmoid"])
    x, W, b, up = _u(rng, 3, 4), _u(rng, 2, 4), _u(rng, 2), _u(rng, 3, 2)
    p = DenseParams(W, b, str(act))

    def f(_):
        return float((dense_forward(x, p)[0] * up).sum())

    dW, db, dx = dense_backward(dense_forward(x, p)[1], up)
    return _worst([(f, W, dW), (f, b, db), (f, x, dx)])


def check_conv2d(rng):
    pad = ["same", "valid"][rng.integers(2)]
    x, K, b = _u(rng, 2, 5, 5), _u(rng, 3, 2, 3, 3), _u(rng, 3)
    up = _u(rng, *conv2d(x, K, b, pad).shape)

    def f(_):
        return float((conv2d(x, K, b, pad) * up).sum())

    dx, dK, db = conv2d_grad(x, K, up, pad)
    return _worst([(f, x, dx), (f, K, dK), (f, b, db)])


def check_maxpool(rng):
    # distinct values spaced far beyond the step so no perturbation flips a winner
    x = (rng.permutation(2 * 4 * 4).reshape(2, 4, 4) / 16.0 - 1.0).astype(np.float64)
    up = _u(rng, 2, 2, 2)
    out, arg = maxpool2d(x)

    def f(_):
        return float((maxpool2d(x)[0] * up).sum())

    return _worst([(f, x, maxpool2d_backward(up, arg, x.shape))])


def check_batchnorm(rng):
    x = _u(rng, 4, 3, 2)
    p = BatchNormParams(_u(rng, 3) + 1.5, _u(rng, 3), np.zeros(3), np.ones(3))
    up = _u(rng, *x.shape)

    def f(_):
        return float((batchnorm_forward(x, p, "train", axis=1)[0] * up).sum())

    dgamma, dbeta, dx = batchnorm_backward(batchnorm_forward(x, p, "train", axis=1)[1], up)
    return _worst([(f, x, dx), (f, p.gamma, dgamma), (f, p.beta, dbeta)])


def _cell_objective(forward, x, prev, p, dH, dC):
    def f(_):
        nxt, _c = forward(x, prev, p)
        return float((nxt.h * dH).sum() + (nxt.c * dC).sum())

    return f


def check_lstm_cell(rng):
    hid, n_in = 4, 3
    p = cells.LstmParams(_u(rng, 4, hid, n_in), _u(rng, 4, hid, hid), _u(rng, 4, hid))
    x = _u(rng, n_in)
    prev = cells.LstmState(_u(rng, hid), _u(rng, hid))
    dH, dC = _u(rng, hid), _u(rng, hid)
    f = _cell_objective(cells.lstm_cell_forward, x, prev, p, dH, dC)
    grads, dx, dprev = cells.lstm_cell_backward(cells.lstm_cell_forward(x, prev, p)[1], dH, dC)
    return _worst([(f, p.W, grads.W), (f, p.R, grads.R), (f, p.b, grads.b), (f, x, dx),
                   (f, prev.h, dprev.h), (f, prev.c, dprev.c)])


def check_convlstm_cell(rng):
    hid, n_in, k = 2, 2, 3
    p = cells.ConvLstmParams(_u(rng, 4, hid, n_in, k, k), _u(rng, 4, hid, hid, k, k), _u(rng, 4, hid))
    x = _u(rng, n_in, 4, 4)
    prev = cells.LstmState(_u(rng, hid, 4, 4), _u(rng, hid, 4, 4))
    dH, dC = _u(rng, hid, 4, 4), _u(rng, hid, 4, 4)
    f = _cell_objective(cells.convlstm_cell_forward, x, prev, p, dH, dC)
    grads, dx, dprev = cells.convlstm_cell_backward(cells.convlstm_cell_forward(x, prev, p)[1], dH, dC)
    return _worst([(f, p.W, grads.W), (f, p.R, grads.R), (f, p.b, grads.b), (f, x, dx),
                   (f, prev.h, dprev.h), (f, prev.c, dprev.c)])


def check_unroll(rng):
    hid, n_in, steps = 3, 2, 3
    p = cells.LstmParams(_u(rng, 4, hid, n_in), _u(rng, 4, hid, hid), _u(rng, 4, hid))
    xs = [_u(rng, n_in) for _ in range(steps)]
    ups = [_u(rng, hid) for _ in range(steps)]
    dc_last = _u(rng, hid)

    def f(_):
        states, _c = cells.unroll(xs, "lstm", p)
        return float(sum((s.h * u).sum() for s, u in zip(states, ups)) + (states[-1].c * dc_last).sum())

    _, caches = cells.unroll(xs, "lstm", p)
    grads, dxs, _ = cells.unroll_backward("lstm", caches, ups, dc_last)
    pairs = [(f, p.W, grads.W), (f, p.R, grads.R), (f, p.b, grads.b)]
    pairs += [(f, x, dx) for x, dx in zip(xs, dxs)]
    return _worst(pairs)


def check_loss_mae(rng):
    P, O = _u(rng, 3, 4), _u(rng, 3, 4)
    keep = np.abs(P - O) >= 1e-3
    # coordinates at the kink are excluded by zeroing both sides of the comparison
    g = np.where(keep, loss_grad("mae", P, O), 0.0)

    def f(q):
        return loss("mae", np.where(keep, q, P_ref), O)

    P_ref = P.copy()
    return _worst([(f, P, g)])


def check_loss_rmse(rng):
    P, O = _u(rng, 3, 4), _u(rng, 3, 4)
    return _worst([(lambda q: loss("rmse", q, O), P, loss_grad("rmse", P, O))])


OP_CHECKS = {
    "dense": check_dense,
    "conv2d": check_conv2d,
    "maxpool2d": check_maxpool,
    "batchnorm_train": check_batchnorm,
    "lstm_cell": check_lstm_cell,
    "convlstm_cell": check_convlstm_cell,
    "unroll_bptt": check_unroll,
    "loss_mae": check_loss_mae,
    "loss_rmse": check_loss_rmse,
}


def toy_model(architecture, seed, loss_kind="rmse"):
    """8×8 frames, timestep 3, hidden 4, cast to float64."""
    units = (4, 4) if architecture == "cnn_lstm" else (4, 4, 4)
    cfg = ModelConfig(architecture, timestep=3, resolution=8, epochs=1, units=units, cnn_filters=2,
                      loss_kind=loss_kind, seed=seed)
    return build_model(cfg).astype(np.float64)


def check_end_to_end(architecture, rng, seed, max_coords=None):
    """Whole-model gradient check; ``max_coords`` samples that many coordinates per tensor."""
    m = toy_model(architecture, seed)
    X = rng.uniform(0, 1, size=(3, 3, 8, 8, 1))
    Y = rng.uniform(0, 1, size=(3, 8, 8, 1))
    for _, arr, _, _ in m.named_parameters():
        # move parameters away from their symmetric initial values (zero biases, unit gammas)
        arr += rng.uniform(-0.1, 0.1, size=arr.shape)

    def f(_):
        m.reseed_dropout(seed)
        return loss(m.config.loss_kind, m.forward(X, "train"), Y)

    m.reseed_dropout(seed)
    pred = m.forward(X, "train")
    m.backward(loss_grad(m.config.loss_kind, pred, Y))
    grads = {name: layer.grads[key].copy() for name, _, layer, key in m.named_parameters()}
    worst = 0.0
    for name, arr, _, _ in m.named_parameters():
        idx = None
        if max_coords is not None and arr.size > max_coords:
            idx = np.sort(rng.choice(arr.size, max_coords, replace=False))
        # no absolute skip here: at h = 1e-5 in float64 the raw relative error is already ~1e-6
        worst = max(worst, finite_diff_check(f, arr, grads[name], E2E_STEP, indices=idx))
    return worst


E2E_COORDS = 12


def run_suite(instances: int = 20, e2e_instances: int = 20, seed: int = 0, report=None,
              e2e_coords: int | None = E2E_COORDS) -> list[CheckResult]:
    """Every per-op check on ``instances`` random cases, then each architecture end to end.

    End-to-end instances sample ``e2e_coords`` coordinates per parameter
    tensor (None checks them all).
    """
    results = []
    for k, (name, check) in enumerate(OP_CHECKS.items()):
        rng = np.random.default_rng([seed, k])
        start = time.perf_counter()
        worst = max(check(rng) for _ in range(instances))
        results.append(CheckResult(name, instances, worst, OP_TOL, time.perf_counter() - start))
        if report:
            report(results[-1])
    for k, arch in enumerate(("stack_lstm", "cnn_lstm", "conv_lstm")):
        rng = np.random.default_rng([seed, 100 + k])
        start = time.perf_counter()
        worst = max(check_end_to_end(arch, rng, seed + i, e2e_coords) for i in range(e2e_instances))
        results.append(CheckResult(f"e2e_{arch}", e2e_instances, worst, E2E_TOL, time.perf_counter() - start))
        if report:
            report(results[-1])
    return results

"""Hot inner loops: im2col/col2im gathers and 2x2 max pooling.

Two interchangeable implementations live here. The numba versions are plain
nested loops compiled with ``@njit``; the numpy versions use strided views.
``NEXTFRAME_KERNELS=numpy`` forces the fallback, anything else (or unset)
uses numba when it imports cleanly. Both paths are single-threaded and
deterministic; they agree exactly on gathers and pooling.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _backend_from_env() -> str:
    choice = os.environ.get("NEXTFRAME_KERNELS", "numba").strip().lower()
    if choice not in ("numba", "numpy"):
        raise ValueError(f"NEXTFRAME_KERNELS must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba" and not HAVE_NUMBA:
        return "numpy"
    return choice


BACKEND = _backend_from_env()


# ---------------------------------------------------------------- numpy path


def im2col_numpy(xp, k, ho, wo):
    """(B, C, Hp, Wp) padded input -> (B, C*k*k, ho*wo) patch matrix."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, ho, wo, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, ho * wo)


def col2im_numpy(cols, padded_shape, k, ho, wo):
    b, c, hp, wp = padded_shape
    cols = cols.reshape(b, c, k, k, ho, wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + ho, kj:kj + wo] += cols[:, :, ki, kj]
    return out


def maxpool2_numpy(x):
    """2x2/2 max pool on (B, C, H, W); returns output and flat argmax into x."""
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    local = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    bi, ci, oi, oj = np.indices(local.shape, sparse=True)
    rows = 2 * oi + local // 2
    cols = 2 * oj + local % 2
    flat = ((bi * c + ci) * h + rows) * w + cols
    return out, flat.astype(np.int64)


def maxpool2_backward_numpy(dy, argmax, x_shape):
    dx = np.zeros(int(np.prod(x_shape)), dtype=dy.dtype)
    dx[argmax.ravel()] = dy.ravel()
    return dx.reshape(x_shape)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_numba(xp, out, k, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        for n in range(b):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for i in range(ho):
                            for j in range(wo):
                                out[n, row, i * wo + j] = xp[n, ch, i + ki, j + kj]
        return out

    def im2col_numba(xp, k, ho, wo):
        # numpy's allocator (huge-page aware) is much cheaper than numba's for large buffers
        out = np.empty((xp.shape[0], xp.shape[1] * k * k, ho * wo), dtype=xp.dtype)
        return _im2col_numba(xp, out, k, ho, wo)

    @njit(cache=True)
    def _col2im_numba(cols, out, k, ho, wo):
        b, c = out.shape[0], out.shape[1]
        for n in range(b):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for i in range(ho):
                            for j in range(wo):
                                out[n, ch, i + ki, j + kj] += cols[n, row, i * wo + j]
        return out

    def col2im_numba(cols, padded_shape, k, ho, wo):
        out = np.zeros(padded_shape, dtype=cols.dtype)
        return _col2im_numba(np.ascontiguousarray(cols), out, k, ho, wo)

    @njit(cache=True)
    def maxpool2_numba(x):
        b, c, h, w = x.shape
        out = np.empty((b, c, h // 2, w // 2), dtype=x.dtype)
        arg = np.empty((b, c, h // 2, w // 2), dtype=np.int64)
        for n in range(b):
            for ch in range(c):
                base = (n * c + ch) * h
                for i in range(h // 2):
                    for j in range(w // 2):
                        # row-major scan of the block; first maximum wins ties
                        best = x[n, ch, 2 * i, 2 * j]
                        bi, bj = 2 * i, 2 * j
                        for di in range(2):
                            for dj in range(2):
                                v = x[n, ch, 2 * i + di, 2 * j + dj]
                                if v > best:
                                    best = v
                                    bi, bj = 2 * i + di, 2 * j + dj
                        out[n, ch, i, j] = best
                        arg[n, ch, i, j] = (base + bi) * w + bj
        return out, arg

    @njit(cache=True)
    def _maxpool2_backward_numba(dy, argmax, dx):
        flat_dy = dy.ravel()
        flat_arg = argmax.ravel()
        for idx in range(flat_dy.size):
            dx[flat_arg[idx]] = flat_dy[idx]
        return dx

    def maxpool2_backward_numba(dy, argmax, x_shape):
        dx = np.zeros(int(np.prod(x_shape)), dtype=dy.dtype)
        _maxpool2_backward_numba(np.ascontiguousarray(dy), np.ascontiguousarray(argmax), dx)
        return dx.reshape(x_shape)


_TABLE = {
    "numpy": (im2col_numpy, col2im_numpy, maxpool2_numpy, maxpool2_backward_numpy),
}
if HAVE_NUMBA:
    _TABLE["numba"] = (im2col_numba, col2im_numba, maxpool2_numba, maxpool2_backward_numba)


def kernels(backend: str | None = None):
    """Return the (im2col, col2im, maxpool2, maxpool2_backward) tuple for a backend."""
    return _TABLE[backend or BACKEND]


def im2col(xp, k, ho, wo):
    return _TABLE[BACKEND][0](np.ascontiguousarray(xp), k, ho, wo)


def col2im(cols, padded_shape, k, ho, wo):
    return _TABLE[BACKEND][1](cols, padded_shape, k, ho, wo)


def maxpool2(x):
    return _TABLE[BACKEND][2](np.ascontiguousarray(x))


def maxpool2_backward(dy, argmax, x_shape):
    return _TABLE[BACKEND][3](dy, argmax, x_shape)

"""Dense tensor primitives and the FCT1 binary container.

Tensors are plain ``numpy.ndarray`` values. New tensors default to float32;
every op preserves the floating dtype of its inputs so the gradient checks can
run the same code in float64.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np
from scipy.special import expit

from . import _kernels

DTYPE = np.float32
MAX_RANK = 5
MAGIC = b"FCT1"


class ShapeError(ValueError):
    """Raised when extents violate an operation's contract."""


class TensorFormatError(ValueError):
    """Base class for malformed FCT1 files."""


class BadMagicError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


def _check_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"extents must be positive, got {dims}")
    return dims


def tensor_create(dims, fill: float = 0.0, dtype=DTYPE) -> np.ndarray:
    return np.full(_check_dims(dims), fill, dtype=dtype)


def sigmoid(x):
    return expit(x)


def _d_sigmoid(x):
    s = expit(x)
    return s * (1 - s)


def _d_tanh(x):
    t = np.tanh(x)
    return 1 - t * t


def _relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def _d_relu(x):
    return (x > 0).astype(x.dtype)


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "relu": _relu,
    "d_sigmoid": _d_sigmoid,
    "d_tanh": _d_tanh,
    "d_relu": _d_relu,
}
_BINARY = {"add": np.add, "sub": np.subtract, "hadamard": np.multiply}


def elementwise(kind: str, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Apply an activation, activation derivative, or same-shape binary op.

    Derivative kinds take the pre-activation ``a`` (``d_tanh(x) = 1 - tanh(x)**2``).
    """
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None or a.shape != b.shape:
            raise ShapeError(f"{kind} needs equal shapes, got {a.shape} and {None if b is None else b.shape}")
        return _BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def reshape(x: np.ndarray, new_dims) -> np.ndarray:
    new_dims = tuple(int(d) for d in new_dims)
    if int(np.prod(new_dims)) != x.size or any(d < 1 for d in new_dims):
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {new_dims}")
    return x.reshape(new_dims)


# ------------------------------------------------------------- convolution


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"conv input must be C×H×W or B×C×H×W, got shape {x.shape}")


def _conv_geometry(x4, kernels, pad):
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernels must be C_out×C_in×K×K, got {kernels.shape}")
    cout, cin, k, _ = kernels.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if x4.shape[1] != cin:
        raise ShapeError(f"input has {x4.shape[1]} channels, kernels expect {cin}")
    if pad == "same":
        p = (k - 1) // 2
    elif pad == "valid":
        p = 0
        if x4.shape[2] < k or x4.shape[3] < k:
            raise ShapeError(f"input {x4.shape[2:]} smaller than kernel {k} under valid padding")
    else:
        raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")
    ho = x4.shape[2] + 2 * p - k + 1
    wo = x4.shape[3] + 2 * p - k + 1
    return cout, cin, k, p, ho, wo


def _padded(x4, p):
    if p == 0:
        return x4
    return np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None, pad: str = "same") -> np.ndarray:
    """Cross-correlation of a (batched) multi-channel image with a kernel bank."""
    x4, single = _as_batch(x)
    cout, cin, k, p, ho, wo = _conv_geometry(x4, kernels, pad)
    cols = _kernels.im2col(_padded(x4, p), k, ho, wo)
    out = np.matmul(kernels.reshape(cout, -1), cols)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
        out += bias[None, :, None]
    out = out.reshape(x4.shape[0], cout, ho, wo)
    return out[0] if single else out


def conv2d_grad(x, kernels, upstream, pad: str = "same"):
    """Gradients of ``sum(conv2d(x, kernels, bias) * upstream)``.

    Returns ``(d_input, d_kernels, d_bias)``.
    """
    x4, single = _as_batch(x)
    cout, cin, k, p, ho, wo = _conv_geometry(x4, kernels, pad)
    dy = upstream[None] if single else upstream
    if dy.shape != (x4.shape[0], cout, ho, wo):
        raise ShapeError(f"upstream shape {upstream.shape} does not match conv output")
    xp = _padded(x4, p)
    cols = _kernels.im2col(xp, k, ho, wo)
    dy = dy.reshape(x4.shape[0], cout, ho * wo)
    kmat = kernels.reshape(cout, -1)
    d_kernels = np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
    d_bias = dy.sum(axis=(0, 2))
    d_cols = np.matmul(kmat.T, dy)
    dxp = _kernels.col2im(d_cols, xp.shape, k, ho, wo)
    dx = dxp[:, :, p:p + x4.shape[2], p:p + x4.shape[3]] if p else dxp
    dx = np.ascontiguousarray(dx)
    return (dx[0] if single else dx), d_kernels, d_bias


# ------------------------------------------------------------- max pooling


def maxpool2d(x: np.ndarray, window: int = 2):
    """2×2, stride-2 max pooling over the trailing two axes.

    Returns ``(output, argmax)`` where ``argmax`` holds, per output element, the
    flat row-major index of the winning input element.
    """
    if window != 2:
        raise ValueError("only window=2 is supported")
    x4, single = _as_batch(x)
    if x4.shape[2] % 2 or x4.shape[3] % 2:
        raise ShapeError(f"pooling needs even H and W, got {x4.shape[2:]}")
    out, arg = _kernels.maxpool2(x4)
    return (out[0], arg[0]) if single else (out, arg)


def maxpool2d_backward(upstream: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    if upstream.shape != argmax.shape:
        raise ShapeError("upstream and argmax shapes differ")
    return _kernels.maxpool2_backward(upstream, argmax, tuple(input_shape))


# -------------------------------------------------------------- FCT1 format


def write_tensor(dest, x: np.ndarray) -> None:
    """Write ``x`` as FCT1 to a path or binary file object."""
    dims = _check_dims(x.shape)
    payload = MAGIC + struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    payload += np.ascontiguousarray(x, dtype="<f4").tobytes()
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as fh:
            fh.write(payload)
    else:
        dest.write(payload)


def read_tensor(src) -> np.ndarray:
    """Read an FCT1 tensor from a path, bytes, or binary file object."""
    if isinstance(src, (bytes, bytearray)):
        raw = bytes(src)
    elif isinstance(src, (str, os.PathLike)):
        with open(src, "rb") as fh:
            raw = fh.read()
    else:
        raw = src.read()
    return _decode(raw)


def _decode(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError("file shorter than the magic header")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    buf = io.BytesIO(raw[4:])
    head = buf.read(4)
    if len(head) < 4:
        raise TruncatedFileError("missing rank field")
    (rank,) = struct.unpack("<I", head)
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"rank {rank} outside 1..{MAX_RANK}")
    ext = buf.read(4 * rank)
    if len(ext) < 4 * rank:
        raise TruncatedFileError("extent list truncated")
    dims = _check_dims(struct.unpack(f"<{rank}I", ext))
    count = int(np.prod(dims))
    body = buf.read()
    if len(body) < 4 * count:
        raise TruncatedFileError(f"expected {4 * count} payload bytes, found {len(body)}")
    if len(body) > 4 * count:
        raise TensorFormatError(f"{len(body) - 4 * count} trailing bytes after payload")
    return np.frombuffer(body, dtype="<f4").astype(DTYPE).reshape(dims)

import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nextframe import _kernels
from nextframe.gradcheck import check_conv2d, check_maxpool
from nextframe.tensor import (
    BadMagicError,
    ShapeError,
    TensorFormatError,
    TruncatedFileError,
    conv2d,
    conv2d_grad,
    elementwise,
    matmul,
    maxpool2d,
    maxpool2d_backward,
    read_tensor,
    reshape,
    tensor_create,
    write_tensor,
)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv(x, K, bias, pad):
    cout, cin, k, _ = K.shape
    p = (k - 1) // 2 if pad == "same" else 0
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = bias[o]
                for c in range(cin):
                    for a in range(k):
                        for b in range(k):
                            acc += xp[c, i + a, j + b] * K[o, c, a, b]
                out[o, i, j] = acc
    return out


# ------------------------------------------------------------------ create


def test_create_zero_fill():
    t = tensor_create([2, 3], 0)
    assert t.shape == (2, 3) and t.dtype == np.float32 and not t.any()


def test_create_counts():
    assert tensor_create([2, 1, 2, 2], 1).sum() == 8


def test_create_frame_buffer():
    assert tensor_create([64, 64, 1], 0).size == 4096


@pytest.mark.parametrize("dims", [[0, 2], [2, -1], [], [1] * 6])
def test_create_rejects(dims):
    with pytest.raises(ShapeError):
        tensor_create(dims, 0)


# ------------------------------------------------------------- elementwise


def test_activation_symmetry_points():
    z = np.zeros(1, np.float32)
    assert elementwise("sigmoid", z)[0] == 0.5
    assert elementwise("tanh", z)[0] == 0.0


def test_hadamard():
    assert elementwise("hadamard", np.array([1.0, 2.0]), np.array([3.0, 4.0])).tolist() == [3.0, 8.0]


def test_relu_split():
    assert elementwise("relu", np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]


def test_binary_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise("add", np.zeros(2), np.zeros(3))


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_d_sigmoid_identity(values):
    x = np.array(values)
    s = elementwise("sigmoid", x)
    assert np.allclose(elementwise("d_sigmoid", x), s * (1 - s), atol=1e-7, rtol=0)


def test_d_tanh_and_d_relu():
    x = np.array([-2.0, -0.5, 0.5, 2.0])
    assert np.allclose(elementwise("d_tanh", x), 1 - np.tanh(x) ** 2)
    assert elementwise("d_relu", x).tolist() == [0, 0, 1, 1]


def test_elementwise_preserves_float32():
    x = np.linspace(-3, 3, 7, dtype=np.float32)
    for kind in ("sigmoid", "tanh", "relu", "d_sigmoid", "d_tanh", "d_relu"):
        assert elementwise(kind, x).dtype == np.float32, kind


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), A), A)


def test_matmul_hand_product():
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


@pytest.mark.parametrize("m,k,n", list(itertools.product([1, 2, 3], repeat=3)))
def test_matmul_against_triple_loop(m, k, n):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a = rng.integers(-5, 6, size=(m, k)).astype(np.float32)
    b = rng.integers(-5, 6, size=(k, n)).astype(np.float32)
    out = matmul(a, b)
    assert out.shape == (m, n)
    assert np.array_equal(out, naive_matmul(a, b))


def test_matmul_errors():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.zeros(3), np.zeros((3, 1)))


# ----------------------------------------------------------------- reshape


def test_reshape_keeps_flat_order():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert reshape(x, [6]).tolist() == list(range(6))


def test_reshape_roundtrip():
    x = np.arange(16, dtype=np.float32).reshape(4, 4)
    assert np.array_equal(reshape(reshape(x, [16]), [4, 4]), x)


def test_reshape_count_mismatch():
    with pytest.raises(ShapeError):
        reshape(np.zeros((2, 3)), [7])


# ------------------------------------------------------------------ conv2d


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(0).uniform(-1, 1, (1, 6, 5)).astype(np.float32)
    K = np.zeros((1, 1, 3, 3), np.float32)
    K[0, 0, 1, 1] = 1
    assert np.array_equal(conv2d(x, K, np.zeros(1, np.float32), "same"), x)


@given(st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_conv_delta_identity_property(c, h, w, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (2, c, h, w))
    K = np.zeros((c, c, 3, 3))
    for ch in range(c):
        K[ch, ch, 1, 1] = 1
    assert np.array_equal(conv2d(x, K, np.zeros(c), "same"), x)


def test_conv_counts_overlap():
    out = conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), "same")
    assert out[0, 1, 1] == 9
    assert out[0, 0, 0] == out[0, 0, 2] == out[0, 2, 0] == out[0, 2, 2] == 4


@pytest.mark.parametrize("pad", ["same", "valid"])
def test_conv_matches_naive_loops(pad):
    rng = np.random.default_rng(1)
    x, K, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = conv2d(x, K, b, pad)
    assert out.shape == ((3, 5, 5) if pad == "same" else (3, 3, 3))
    assert np.allclose(out, naive_conv(x, K, b, pad), atol=1e-12)


def test_conv_batch_matches_per_sample():
    rng = np.random.default_rng(2)
    x, K, b = rng.normal(size=(4, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    batched = conv2d(x, K, b)
    for n in range(4):
        assert np.allclose(batched[n], conv2d(x[n], K, b))


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1), "valid")


def test_conv_grad_linearity():
    rng = np.random.default_rng(3)
    x, K = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    for g in conv2d_grad(x, K, np.zeros((3, 5, 5))):
        assert not g.any()
    up = rng.normal(size=(3, 5, 5))
    single = conv2d_grad(x, K, up)
    double = conv2d_grad(x, K, 2 * up)
    for a, b in zip(single, double):
        assert np.allclose(b, 2 * a)


def test_conv_grad_shape_error():
    with pytest.raises(ShapeError):
        conv2d_grad(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros((1, 3, 3)))


def test_conv_grad_finite_differences():
    rng = np.random.default_rng(4)
    assert max(check_conv2d(rng) for _ in range(20)) <= 1e-4


# ----------------------------------------------------------------- maxpool


def test_maxpool_picks_max():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out, arg = maxpool2d(x)
    assert out.ravel().tolist() == [4.0]
    assert arg.ravel().tolist() == [3]


def test_maxpool_constant():
    out, _ = maxpool2d(np.full((2, 4, 6), 0.25))
    assert out.shape == (2, 2, 3) and np.all(out == 0.25)


def test_maxpool_backward_routes_to_argmax():
    x = np.random.default_rng(5).permutation(32).reshape(2, 4, 4).astype(np.float64)
    out, arg = maxpool2d(x)
    dx = maxpool2d_backward(np.ones_like(out), arg, x.shape)
    assert dx.sum() == out.size
    assert np.array_equal(dx.ravel()[arg.ravel()], np.ones(out.size))
    assert np.array_equal(x * dx, np.where(dx == 1, x, 0))
    assert max(check_maxpool(np.random.default_rng(6)) for _ in range(20)) <= 1e-4


def test_maxpool_odd_extent():
    with pytest.raises(ShapeError):
        maxpool2d(np.zeros((1, 3, 4)))


# ------------------------------------------------------------ both backends


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba unavailable")
def test_backends_agree_exactly():
    rng = np.random.default_rng(7)
    xp = rng.normal(size=(3, 2, 8, 9))
    numpy_k, numba_k = _kernels.kernels("numpy"), _kernels.kernels("numba")
    cols = numpy_k[0](xp, 3, 6, 7)
    assert np.array_equal(cols, numba_k[0](xp, 3, 6, 7))
    assert np.array_equal(numpy_k[1](cols, xp.shape, 3, 6, 7), numba_k[1](cols, xp.shape, 3, 6, 7))
    x = rng.normal(size=(2, 3, 6, 8))
    out_a, arg_a = numpy_k[2](x)
    out_b, arg_b = numba_k[2](x)
    assert np.array_equal(out_a, out_b) and np.array_equal(arg_a, arg_b)
    dy = rng.normal(size=out_a.shape)
    assert np.array_equal(numpy_k[3](dy, arg_a, x.shape), numba_k[3](dy, arg_a, x.shape))


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba unavailable")
def test_backends_tie_break_identically():
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, :2, :2] = [[3, 3], [3, 1]]
    assert np.array_equal(_kernels.kernels("numpy")[2](x)[1], _kernels.kernels("numba")[2](x)[1])


# -------------------------------------------------------------------- FCT1


def test_fct1_layout_is_bit_exact():
    x = np.array([[1.0, -2.5]], np.float32)
    buf = io.BytesIO()
    write_tensor(buf, x)
    raw = buf.getvalue()
    assert raw[:4] == b"FCT1"
    assert raw[4:16] == (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert raw[16:] == np.array([1.0, -2.5], "<f4").tobytes()


@given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_fct1_roundtrip(dims, seed):
    x = np.random.default_rng(seed).normal(size=dims).astype(np.float32)
    buf = io.BytesIO()
    write_tensor(buf, x)
    y = read_tensor(buf.getvalue())
    assert y.shape == x.shape and y.tobytes() == x.tobytes()


def test_fct1_corruption(tmp_path):
    path = tmp_path / "t.fct"
    write_tensor(path, np.ones((3, 3), np.float32))
    raw = path.read_bytes()
    with pytest.raises(TruncatedFileError):
        read_tensor(raw[:-1])
    with pytest.raises(BadMagicError):
        read_tensor(b"XXXX" + raw[4:])
    with pytest.raises(TensorFormatError):
        read_tensor(raw + b"\x00")

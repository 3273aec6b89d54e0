import numpy as np
import pytest

from nextframe.gradcheck import check_batchnorm, check_dense
from nextframe.layers import (
    BatchNormParams,
    DenseParams,
    batchnorm_forward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    glorot_init,
)
from nextframe.tensor import ShapeError


def test_dense_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    y, _ = dense_forward(x, DenseParams(np.eye(4), np.zeros(4)))
    assert np.array_equal(y, x)


def test_dense_hand_product():
    y, _ = dense_forward(np.array([[1.0, 2.0]]), DenseParams(np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2)))
    assert y.tolist() == [[3.0, 2.0]]


def test_dense_mismatch():
    with pytest.raises(ShapeError):
        dense_forward(np.zeros((2, 3)), DenseParams(np.zeros((2, 4)), np.zeros(2)))


def test_dense_gradients():
    rng = np.random.default_rng(1)
    assert max(check_dense(rng) for _ in range(30)) <= 1e-4


def test_batchnorm_output_statistics():
    rng = np.random.default_rng(2)
    for _ in range(10):
        x = rng.normal(3.0, 2.5, size=(8, 4, 5))
        y, _ = batchnorm_forward(x, BatchNormParams.create(4, dtype=np.float64), "train", axis=1)
        assert np.abs(y.mean(axis=(0, 2))).max() < 1e-5
        var = y.var(axis=(0, 2))
        # epsilon = 1e-3 shrinks the variance to var / (var + eps)
        assert np.all(np.abs(var - 1) <= 1e-3)


def test_batchnorm_constant_batch():
    y, _ = batchnorm_forward(np.full((4, 3), 0.7), BatchNormParams.create(3, dtype=np.float64), "train")
    assert np.allclose(y, 0, atol=1e-6)


def test_batchnorm_eval_neutral_stats():
    x = np.random.default_rng(3).normal(size=(5, 3))
    y, _ = batchnorm_forward(x, BatchNormParams.create(3, dtype=np.float64), "eval")
    assert np.allclose(y, x / np.sqrt(1 + 1e-3))


def test_batchnorm_running_update():
    p = BatchNormParams.create(2, momentum=0.9, dtype=np.float64)
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    batchnorm_forward(x, p, "train")
    assert np.allclose(p.running_mean, 0.1 * np.array([2.0, 4.0]))
    assert np.allclose(p.running_var, 0.9 + 0.1 * np.array([1.0, 4.0]))
    assert np.all(p.running_var >= 0)


def test_batchnorm_needs_batch_of_two():
    with pytest.raises(ShapeError):
        batchnorm_forward(np.zeros((1, 3)), BatchNormParams.create(3), "train")


def test_batchnorm_gradients():
    rng = np.random.default_rng(4)
    assert max(check_batchnorm(rng) for _ in range(20)) <= 1e-4


def test_batchnorm_param_validation():
    with pytest.raises(ValueError):
        BatchNormParams.create(2, epsilon=0)
    with pytest.raises(ValueError):
        BatchNormParams.create(2, momentum=1.0)


def test_dropout_identities():
    x = np.random.default_rng(5).normal(size=(4, 4))
    rng = np.random.default_rng(0)
    assert dropout_forward(x, 0.0, "train", rng)[0] is x
    assert dropout_forward(x, 0.0, "eval", rng)[0] is x
    assert dropout_forward(x, 0.7, "eval", rng)[0] is x


def test_dropout_rate_bound():
    with pytest.raises(ValueError):
        dropout_forward(np.ones(3), 1.0, "train", np.random.default_rng(0))


def _dropout_mean(x, rate, trials, seed):
    rng = np.random.default_rng(seed)
    acc = np.zeros_like(x)
    for _ in range(trials):
        acc += dropout_forward(x, rate, "train", rng)[0]
    return acc / trials


def test_dropout_expectation():
    x = np.array([0.3, 0.8, 1.0, 1.7])
    assert np.all(np.abs(_dropout_mean(x, 0.5, 10000, 1) - x) <= 0.02 * np.abs(x))


def test_dropout_expectation_z_scores():
    # each survivor scale is 2x with p = 0.5, so the per-element std of the mean is x / sqrt(trials)
    x = np.random.default_rng(6).uniform(0.5, 1.5, size=(4, 5))
    z = (_dropout_mean(x, 0.5, 10000, 8) - x) / (x / 100)
    assert np.abs(z).max() < 4.5


def test_dropout_backward_uses_mask():
    rng = np.random.default_rng(8)
    x = np.ones((3, 3))
    y, mask = dropout_forward(x, 0.5, "train", rng)
    assert np.array_equal(dropout_backward(mask, np.ones_like(x)), y)
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_glorot_bounds():
    w = glorot_init([100, 100], np.random.default_rng(9))
    assert np.abs(w).max() <= np.sqrt(6 / 200)


def test_glorot_conv_fans():
    w = glorot_init([8, 4, 3, 3], np.random.default_rng(10))
    assert np.abs(w).max() <= np.sqrt(6 / (8 * 9 + 4 * 9))


def test_glorot_mean():
    assert abs(glorot_init([100, 100], np.random.default_rng(11)).mean()) < 0.01


def test_glorot_deterministic():
    a = glorot_init([7, 5], np.random.default_rng(12))
    b = glorot_init([7, 5], np.random.default_rng(12))
    assert a.tobytes() == b.tobytes()


def test_glorot_rank():
    with pytest.raises(ShapeError):
        glorot_init([5], np.random.default_rng(0))

"""Primitive ops against brute-force oracles, plus finite-difference checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chexfusion import gradsuite, nn
from chexfusion.errors import GradCheckError, ShapeError
from chexfusion.nn import GradOp, gradient_check


def conv_oracle(x, w, stride, padding):
    """Direct six-loop cross-correlation."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for b in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (1, 0, 1), (2, 0, 1)])
def test_conv2d_matches_loops(stride, padding, k):
    rng = np.random.default_rng(k + stride)
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, k, k))
    np.testing.assert_allclose(nn.conv2d(x, w, stride, padding), conv_oracle(x, w, stride, padding), atol=1e-12)


def test_conv2d_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    # a flipped-kernel convolution would pick w[2, 2] here
    assert nn.conv2d(x, w, 1, 0)[0, 0, 0, 0] == w[0, 0, 0, 0]


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5))
    np.testing.assert_array_equal(nn.conv2d(x, np.ones((1, 1, 1, 1)), 1, 0), x)


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        nn.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)))
    with pytest.raises(ShapeError):
        nn.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))


def test_batch_norm_train_uses_biased_variance_and_updates_running_stats():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = np.zeros(3), np.ones(3)
    y = nn.batch_norm(x, gamma, beta, rm, rv, "train", momentum=0.1, eps=1e-5)
    for c in range(3):
        vals = x[:, c].ravel()
        mu = vals.mean()
        var = ((vals - mu) ** 2).sum() / vals.size
        expect = (x[:, c] - mu) / np.sqrt(var + 1e-5) * gamma[c] + beta[c]
        np.testing.assert_allclose(y[:, c], expect, atol=1e-12)
        assert rm[c] == pytest.approx(0.1 * mu)
        assert rv[c] == pytest.approx(0.9 + 0.1 * var)


def test_batch_norm_eval_reads_running_stats():
    x = np.full((2, 1, 2, 2), 3.0)
    y = nn.batch_norm(x, np.ones(1), np.zeros(1), np.array([1.0]), np.array([4.0]), "eval", eps=0.0 + 1e-12)
    np.testing.assert_allclose(y, 1.0)


def test_batch_norm_constant_channel_is_finite():
    y = nn.batch_norm(np.ones((3, 2, 2, 2)), np.ones(2), np.zeros(2), mode="train")
    assert np.all(np.isfinite(y)) and np.all(y == 0)


def test_relu_subgradient_at_zero_is_zero():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(nn.relu(x), [0, 0, 2])
    np.testing.assert_array_equal(nn.relu_backward(np.ones(3), x), [0, 0, 1])


def test_maxpool_tie_goes_to_first_row_major():
    x = np.ones((1, 1, 2, 2))
    dx = nn.pool_backward(np.ones((1, 1, 1, 1)), x, "max", 2, 2, 2)
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_pool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(nn.pool(x, "max", 2, 2, 2)[0, 0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(nn.pool(x, "avg", 2, 2, 2)[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_maxpool_padding_never_wins():
    x = -np.ones((1, 1, 4, 4))
    out = nn.pool(x, "max", 3, 3, 2, padding=1)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out, -1)


def test_global_avg_pool():
    x = np.random.default_rng(2).standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(nn.global_avg_pool(x), x.mean(axis=(2, 3)))


def test_linear_identity():
    x = np.random.default_rng(3).standard_normal((3, 4))
    np.testing.assert_array_equal(nn.linear(x, np.eye(4), np.zeros(4)), x)


def test_sigmoid_is_stable_at_extremes():
    p = nn.sigmoid(np.array([-1000.0, -40.0, 0.0, 40.0, 1000.0]))
    assert np.all(np.isfinite(p))
    assert np.all((p > 0) & (p < 1))
    assert p[2] == 0.5


def test_bce_matches_elementwise_formula():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.01, 0.99, (5, 14))
    y = (rng.random((5, 14)) < 0.3).astype(float)
    expect = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert nn.bce_loss(p, y) == pytest.approx(expect, rel=1e-12)


def test_bce_clamps_confident_mistakes():
    loss = nn.bce_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
    assert loss == pytest.approx(-np.log(1e-7))
    assert nn.bce_loss(np.array([[1e-9]]), np.array([[0.0]])) < 1e-6


def test_bce_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.bce_loss(np.zeros((2, 3)), np.zeros((3, 2)))


@given(
    st.integers(1, 4).flatmap(
        lambda n: st.tuples(
            arrays(np.float64, (n, 3), elements=st.floats(-1e3, 1e3)),
            arrays(np.float64, (n, 2), elements=st.floats(-1e3, 1e3)),
            arrays(np.float64, (n, 5), elements=st.floats(-1e3, 1e3)),
        )
    )
)
def test_concat_then_split_is_identity(arrs):
    a, b, g = arrs
    out = nn.concat_features(a, b)
    np.testing.assert_array_equal(out[:, :3], a)
    da, db = nn.concat_features_backward(g, 3)
    np.testing.assert_array_equal(np.concatenate([da, db], axis=1), g)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e4, 1e4)))
def test_sigmoid_range_and_symmetry(x):
    p = nn.sigmoid(x)
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(p + nn.sigmoid(-x), 1.0, atol=1e-15)


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e6, 1e6)))
def test_add_zero_is_identity(a):
    np.testing.assert_array_equal(nn.elementwise_add(a, np.zeros_like(a)), a)


# ---------------------------------------------------------------------------
# finite differences


@pytest.mark.parametrize("op_tol", gradsuite.suite("tiny")[:-1], ids=lambda pair: pair[0].name)
def test_gradient_check_per_op(op_tol):
    op, tol = op_tol
    report = gradient_check(op, tolerance=tol, seed=3)
    assert report.tested_points > 0
    assert report.max_rel_error < tol, report


def test_gradient_check_detects_wrong_backward():
    op = GradOp(
        "bad_square",
        forward=lambda d: d["x"] ** 2,
        backward=lambda d, g: {"x": 2.1 * d["x"] * g},
        sample=lambda rng: {"x": rng.standard_normal(5)},
    )
    assert not gradient_check(op).passed


def test_gradient_check_relative_error_definition():
    # backward off by exactly a factor 3: |3a - a| / (3a + a) = 0.5
    op = GradOp("scaled", lambda d: d["x"] * 1.0, lambda d, g: {"x": 3.0 * g}, lambda rng: {"x": rng.random(4)})
    assert gradient_check(op).max_rel_error == pytest.approx(0.5, abs=1e-6)


def test_gradient_check_resamples_away_from_kinks():
    op = gradsuite.relu_op()
    report = gradient_check(op, {"x": np.array([0.0, 1.0, -1.0])})
    assert report.attempts >= 2 and report.passed


def test_gradient_check_gives_up_after_ten_attempts():
    op = GradOp(
        "always_kinked",
        forward=lambda d: np.abs(d["x"]),
        backward=lambda d, g: {"x": np.sign(d["x"]) * g},
        sample=lambda rng: {"x": np.zeros(3)},
        kink_distance=lambda d: float(np.min(np.abs(d["x"]))),
    )
    with pytest.raises(GradCheckError):
        gradient_check(op)


def test_gradient_check_without_sampler_at_kink():
    op = GradOp("relu", lambda d: nn.relu(d["x"]), lambda d, g: {"x": nn.relu_backward(g, d["x"])},
                kink_distance=lambda d: float(np.min(np.abs(d["x"]))))
    with pytest.raises(GradCheckError):
        gradient_check(op, {"x": np.zeros(2)})

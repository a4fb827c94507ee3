import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chexfusion import nn
from chexfusion.errors import ConfigError, ShapeError
from chexfusion.head import (
    FusionHead,
    HeadConfig,
    HeadParams,
    baseline_forward,
    build_model,
    fuse_backward,
    fuse_forward,
    head_init,
)


def head_oracle(p, m, par):
    """The fused head written out with plain numpy, no shared helpers."""
    z = np.hstack([p, m])
    h1 = np.maximum(z @ par.W1.T + par.b1, 0)
    h2 = np.maximum(h1 @ par.W2.T + par.b2, 0)
    logits = (h2 + p) @ par.W3.T + par.b3
    return logits, 1 / (1 + np.exp(-logits))


def test_shapes_at_full_size():
    par = head_init(HeadConfig(1024, 6, 512), seed=0, mode="standard")
    assert par.W1.shape == (512, 1030)
    assert par.W2.shape == (1024, 512)
    assert par.W3.shape == (14, 1024)


def test_forward_matches_oracle():
    rng = np.random.default_rng(0)
    par = head_init(HeadConfig(16, 6, 12), seed=1, mode="standard").astype(np.float64)
    p, m = rng.standard_normal((5, 16)), rng.random((5, 6))
    logits, probs = fuse_forward(p, m, par)
    ref_logits, ref_probs = head_oracle(p, m, par)
    np.testing.assert_allclose(logits, ref_logits, atol=1e-12)
    np.testing.assert_allclose(probs, ref_probs, atol=1e-12)


def test_identity_start_zeroes_second_layer_only():
    par = head_init(HeadConfig(8, 6, 10), seed=3, mode="identity_start")
    std = head_init(HeadConfig(8, 6, 10), seed=3, mode="standard")
    assert not par.W2.any() and not par.b2.any()
    np.testing.assert_array_equal(par.W1, std.W1)
    np.testing.assert_array_equal(par.W3, std.W3)


def test_linear_init_bounds():
    par = head_init(HeadConfig(100, 6, 50), seed=0, mode="standard")
    assert np.abs(par.W1).max() <= np.sqrt(1 / 106)
    assert np.abs(par.W3).max() <= np.sqrt(1 / 100)


def test_unknown_init_mode():
    with pytest.raises(ConfigError):
        head_init(HeadConfig(8), mode="xavier")


def test_shape_errors():
    par = head_init(HeadConfig(8, 6, 10))
    with pytest.raises(ShapeError):
        fuse_forward(np.zeros((2, 7)), np.zeros((2, 6)), par)
    with pytest.raises(ShapeError):
        fuse_forward(np.zeros((2, 8)), np.zeros((3, 6)), par)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([np.float32, np.float64]), st.floats(0.1, 100))
def test_identity_map_is_exact(seed, dtype, scale):
    rng = np.random.default_rng(seed)
    par = head_init(HeadConfig(16, 6, 12), seed=seed, mode="identity_start").astype(dtype)
    p = np.abs(rng.standard_normal((4, 16)) * scale).astype(dtype)
    m = (rng.standard_normal((4, 6)) * scale).astype(dtype)
    np.testing.assert_array_equal(fuse_forward(p, m, par)[1], baseline_forward(p, par))


def test_identity_map_holds_for_negative_features():
    # the skip lands after the second ReLU, so negative p survives unchanged
    par = head_init(HeadConfig(8, 6, 10), seed=0, mode="identity_start")
    p = -np.ones((2, 8), np.float32)
    np.testing.assert_array_equal(fuse_forward(p, np.ones((2, 6), np.float32), par)[1], baseline_forward(p, par))


def test_skip_gradient_equals_baseline_when_fc_layers_are_zero():
    rng = np.random.default_rng(4)
    par = head_init(HeadConfig(8, 6, 10), seed=0, mode="standard").astype(np.float64)
    par = HeadParams(np.zeros_like(par.W1), par.b1, np.zeros_like(par.W2), par.b2 * 0, par.W3, par.b3)
    p, m = rng.standard_normal((3, 8)), rng.standard_normal((3, 6))
    g = rng.standard_normal((3, 14))
    dp, dm, _ = fuse_backward(g, p, m, par)
    np.testing.assert_array_equal(dp, g @ par.W3)
    assert not dm.any()


def test_identity_start_gets_no_second_layer_gradient():
    # relu'(0) = 0 and W2 = b2 = 0 means the second layer sees zero gradient
    rng = np.random.default_rng(0)
    par = head_init(HeadConfig(8, 6, 10), seed=0, mode="identity_start").astype(np.float64)
    _, _, grads = fuse_backward(rng.standard_normal((3, 14)), rng.random((3, 8)), rng.random((3, 6)), par)
    assert not grads["W2"].any() and not grads["b2"].any()


def test_module_param_names_and_image_only_mode():
    head = FusionHead(HeadConfig(8, 6, 10), seed=0, mode="standard", use_metadata=False)
    names = [p.name for p in head.parameters()]
    assert names == ["head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias",
                     "head.classifier.weight", "head.classifier.bias"]
    p = np.random.default_rng(0).random((2, 8)).astype(np.float32)
    np.testing.assert_array_equal(nn.sigmoid(head.forward(p, None)), baseline_forward(p, head.params))


def test_untrained_identity_model_equals_baseline_end_to_end():
    model = build_model("tiny", hidden1=16, seed=2)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 3, 32, 32)).astype(np.float32)
    m = rng.random((3, 6)).astype(np.float32)
    p = model.backbone.forward(x, False)
    np.testing.assert_array_equal(model.predict_proba(x, m), baseline_forward(p, model.head.params))

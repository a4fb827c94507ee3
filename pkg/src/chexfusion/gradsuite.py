"""Finite-difference checks for every differentiable piece of the model.

Each ``*_op`` factory returns a :class:`~chexfusion.nn.GradOp` operating in
double precision. :func:`run_suite` runs them all.
"""

import numpy as np

from . import nn
from .backbone import BackboneConfig, DenseBlock, DenseLayer, Transition, build_backbone
from .head import FusionHead, FusionModel, HeadConfig, HeadParams, fuse_backward, fuse_forward
from .nn import GradOp, gradient_check

F64 = np.float64
OP_TOL = 1e-6
COMPOSITE_TOL = 1e-5
END_TO_END_TOL = 1e-4


def _normal(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_zero(rng, *shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def conv2d_op(stride=1, padding=1):
    return GradOp(
        f"conv2d(stride={stride},pad={padding})",
        forward=lambda d: nn.conv2d(d["x"], d["w"], stride, padding),
        backward=lambda d, g: dict(zip(("x", "w"), nn.conv2d_backward(g, d["x"], d["w"], stride, padding))),
        sample=lambda rng: {"x": _normal(rng, 2, 3, 8, 8), "w": _normal(rng, 4, 3, 3, 3)},
    )


def batch_norm_op(mode="train"):
    def forward(d):
        return nn.batch_norm(d["x"], d["gamma"], d["beta"], d["rm"].copy(), d["rv"].copy(), mode)

    def backward(d, g):
        dx, dg, db = nn.batch_norm_backward(g, d["x"], d["gamma"], d["rm"], d["rv"], mode)
        return {"x": dx, "gamma": dg, "beta": db}

    def sample(rng):
        return {
            "x": _normal(rng, 3, 4, 5, 5) * 2 + 1,
            "gamma": _normal(rng, 4),
            "beta": _normal(rng, 4),
            "rm": _normal(rng, 4),
            "rv": rng.uniform(0.5, 2.0, 4),
        }

    return GradOp(f"batch_norm({mode})", forward, backward, sample)


def relu_op():
    return GradOp(
        "relu",
        forward=lambda d: nn.relu(d["x"]),
        backward=lambda d, g: {"x": nn.relu_backward(g, d["x"])},
        sample=lambda rng: {"x": _away_from_zero(rng, 2, 3, 4, 4)},
        kink_distance=lambda d: float(np.min(np.abs(d["x"]))),
    )


def _max_gap(x, k, stride):
    """Smallest gap between the two largest entries of any pooling window."""
    n, c, h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    wins = np.stack(
        [x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] for i in range(k) for j in range(k)], -1
    )
    top2 = np.sort(wins, axis=-1)[..., -2:]
    return float(np.min(top2[..., 1] - top2[..., 0]))


def pool_op(kind, k=2, stride=2):
    return GradOp(
        f"pool({kind},{k}x{k},stride={stride})",
        forward=lambda d: nn.pool(d["x"], kind, k, k, stride),
        backward=lambda d, g: {"x": nn.pool_backward(g, d["x"], kind, k, k, stride)},
        sample=lambda rng: {"x": _normal(rng, 2, 3, 6, 6)},
        kink_distance=(lambda d: _max_gap(d["x"], k, stride)) if kind == "max" else None,
    )


def global_avg_pool_op():
    return GradOp(
        "global_avg_pool",
        forward=lambda d: nn.global_avg_pool(d["x"]),
        backward=lambda d, g: {"x": nn.global_avg_pool_backward(g, d["x"])},
        sample=lambda rng: {"x": _normal(rng, 2, 3, 4, 5)},
    )


def linear_op():
    return GradOp(
        "linear",
        forward=lambda d: nn.linear(d["x"], d["w"], d["b"]),
        backward=lambda d, g: dict(zip(("x", "w", "b"), nn.linear_backward(g, d["x"], d["w"]))),
        sample=lambda rng: {"x": _normal(rng, 4, 7), "w": _normal(rng, 5, 7), "b": _normal(rng, 5)},
    )


def concat_op():
    return GradOp(
        "concat_features",
        forward=lambda d: nn.concat_features(d["a"], d["b"]),
        backward=lambda d, g: dict(zip(("a", "b"), nn.concat_features_backward(g, d["a"].shape[1]))),
        sample=lambda rng: {"a": _normal(rng, 3, 5), "b": _normal(rng, 3, 2)},
    )


def add_op():
    return GradOp(
        "elementwise_add",
        forward=lambda d: nn.elementwise_add(d["a"], d["b"]),
        backward=lambda d, g: dict(zip(("a", "b"), nn.elementwise_add_backward(g))),
        sample=lambda rng: {"a": _normal(rng, 3, 5), "b": _normal(rng, 3, 5)},
    )


def sigmoid_op():
    return GradOp(
        "sigmoid",
        forward=lambda d: nn.sigmoid(d["x"]),
        backward=lambda d, g: {"x": nn.sigmoid_backward(g, d["x"])},
        sample=lambda rng: {"x": _normal(rng, 4, 6) * 3},
    )


def bce_op():
    def sample(rng):
        return {"p": rng.uniform(0.05, 0.95, (4, 14)), "y": (rng.random((4, 14)) < 0.3).astype(F64)}

    return GradOp(
        "bce_loss",
        forward=lambda d: np.float64(nn.bce_loss(d["p"], d["y"])),
        backward=lambda d, g: {"p": g * nn.bce_loss_backward(d["p"], d["y"])},
        sample=sample,
    )


def _module_op(name, make_module, input_shape, training=True):
    """GradOp over a module's input and all of its parameters."""
    module = make_module().astype(F64)
    params = {p.name: p for p in module.parameters()}

    def load(d):
        for k, p in params.items():
            p.value[...] = d[k]

    def forward(d):
        load(d)
        return module.forward(d["x"], training)

    def backward(d, g):
        load(d)
        module.zero_grad()
        module.forward(d["x"], training)
        grads = {"x": module.backward(g)}
        grads.update({k: p.grad.copy() for k, p in params.items()})
        return grads

    def pattern(d):
        forward(d)
        return module.activation_pattern()

    def sample(rng):
        d = {"x": _normal(rng, *input_shape)}
        for k, p in params.items():
            d[k] = p.value + 0.1 * rng.standard_normal(p.value.shape)
        return d

    return GradOp(name, forward, backward, sample, pattern=pattern)


def dense_layer_op():
    rng = np.random.default_rng(1)
    return _module_op("dense_layer", lambda: DenseLayer(6, 4, name="layer", rng=rng), (2, 6, 6, 6))


def transition_op():
    rng = np.random.default_rng(2)
    return _module_op("transition", lambda: Transition(8, 0.5, name="trans", rng=rng), (2, 8, 6, 6))


def dense_block_op():
    rng = np.random.default_rng(3)
    return _module_op("dense_block", lambda: DenseBlock(4, 2, 3, name="block", rng=rng), (2, 4, 5, 5))


def fusion_head_op(feature_dim=8, meta_dim=6, hidden1=10):
    names = ("W1", "b1", "W2", "b2", "W3", "b3")

    def params(d):
        return HeadParams(*(d[k] for k in names))

    def forward(d):
        return fuse_forward(d["p"], d["m"], params(d))[0]

    def backward(d, g):
        dp, dm, grads = fuse_backward(g, d["p"], d["m"], params(d))
        return {"p": dp, "m": dm, **grads}

    def pattern(d):
        par = params(d)
        z = np.concatenate([d["p"], d["m"]], axis=1)
        a1 = z @ par.W1.T + par.b1
        a2 = np.maximum(a1, 0) @ par.W2.T + par.b2
        return [a1 > 0, a2 > 0]

    def sample(rng):
        d = {"p": _normal(rng, 3, feature_dim), "m": _normal(rng, 3, meta_dim)}
        shapes = {
            "W1": (hidden1, feature_dim + meta_dim), "b1": (hidden1,), "W2": (feature_dim, hidden1),
            "b2": (feature_dim,), "W3": (14, feature_dim), "b3": (14,),
        }
        d.update({k: _normal(rng, *s) * 0.5 for k, s in shapes.items()})
        return d

    return GradOp("fusion_head", forward, backward, sample, pattern=pattern)


def end_to_end_op(variant="tiny", batch=2, seed=0, n_params=None):
    """BCE loss of the full model w.r.t. images, metadata and parameters."""
    config = BackboneConfig.variant(variant)
    backbone = build_backbone(config, seed)
    head = FusionHead(HeadConfig(backbone.feature_dim, 6, 16), seed + 1, "standard")
    model = FusionModel(backbone, head).astype(F64)
    params = {p.name: p for p in model.parameters()}
    checked = list(params) if n_params is None else list(params)[:: max(1, len(params) // n_params)]
    size = config.input_size
    label_rng = np.random.default_rng(seed + 7)
    labels = (label_rng.random((batch, 14)) < 0.4).astype(F64)

    def load(d):
        for k in checked:
            params[k].value[...] = d[k]

    def loss(d):
        load(d)
        logits = model.forward(d["images"], d["meta"], training=True)
        return nn.sigmoid(logits), logits

    def forward(d):
        probs, _ = loss(d)
        return np.float64(nn.bce_loss(probs, labels))

    def backward(d, g):
        model.zero_grad()
        probs, logits = loss(d)
        dlogits = nn.sigmoid_backward(nn.bce_loss_backward(probs, labels), logits) * g
        dimages = model.backward(dlogits)
        grads = {"images": dimages}
        grads.update({k: params[k].grad.copy() for k in checked})
        return grads

    def pattern(d):
        loss(d)
        return model.activation_pattern()

    def sample(rng):
        d = {"images": _normal(rng, batch, 3, size, size), "meta": rng.random((batch, 6))}
        d.update({k: params[k].value.copy() for k in checked})
        return d

    op = GradOp(f"end_to_end({variant})", forward, backward, sample, pattern=pattern)
    op.model = model
    return op


def suite(variant="tiny"):
    """``(op, tolerance)`` pairs covering every primitive and composite."""
    ops = [
        conv2d_op(1, 1),
        conv2d_op(2, 1),
        conv2d_op(1, 0),
        batch_norm_op("train"),
        batch_norm_op("eval"),
        relu_op(),
        pool_op("max"),
        pool_op("max", 3, 2),
        pool_op("avg"),
        global_avg_pool_op(),
        linear_op(),
        concat_op(),
        add_op(),
        sigmoid_op(),
        bce_op(),
    ]
    composites = [dense_layer_op(), dense_block_op(), transition_op(), fusion_head_op()]
    pairs = [(op, OP_TOL) for op in ops] + [(op, COMPOSITE_TOL) for op in composites]
    pairs.append((end_to_end_op(variant, n_params=12), END_TO_END_TOL))
    return pairs


def run_suite(variant="tiny", seed=0, n_coords=50):
    reports = []
    for op, tol in suite(variant):
        reports.append(gradient_check(op, tolerance=tol, seed=seed, n_coords=n_coords))
    return reports

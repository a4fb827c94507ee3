"""Fusion head: pooled image features + patient metadata -> 14 logits.

    z  = [p, m]
    h1 = relu(W1 z + b1)
    h2 = relu(W2 h1 + b2)          (width D, same as p)
    f  = h2 + p                    (skip from the pooled features)
    logits = W3 f + b3

With W2 = 0 and b2 = 0 the head collapses to ``W3 p + b3``, the plain
image-only classifier, exactly.
"""

from dataclasses import dataclass, fields

import numpy as np

from . import nn
from .backbone import build_backbone, extract_features
from .errors import ConfigError, ShapeError
from .layers import DTYPE, Module, linear_init

NUM_CLASSES = 14
INIT_MODES = ("standard", "identity_start")


@dataclass(frozen=True)
class HeadConfig:
    feature_dim: int
    meta_dim: int = 6
    hidden1: int = 512
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes is fixed at {NUM_CLASSES}")
        if self.feature_dim < 1 or self.hidden1 < 1 or self.meta_dim < 0:
            raise ConfigError("feature_dim and hidden1 must be >= 1, meta_dim >= 0")


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def check(self, feature_dim, meta_dim):
        h1 = self.W1.shape[0]
        expected = {
            "W1": (h1, feature_dim + meta_dim),
            "b1": (h1,),
            "W2": (feature_dim, h1),
            "b2": (feature_dim,),
            "W3": (self.W3.shape[0], feature_dim),
            "b3": (self.W3.shape[0],),
        }
        for f in fields(self):
            got = getattr(self, f.name).shape
            if got != expected[f.name]:
                raise ShapeError(f"head param {f.name} has shape {got}, expected {expected[f.name]}")

    def astype(self, dtype):
        return HeadParams(*(getattr(self, f.name).astype(dtype) for f in fields(self)))


def head_init(config, seed=0, mode="identity_start"):
    if mode not in INIT_MODES:
        raise ConfigError(f"unknown head init mode {mode!r}")
    rng = np.random.default_rng(seed)
    d, m, h1 = config.feature_dim, config.meta_dim, config.hidden1
    W1, b1 = linear_init(h1, d + m, rng)
    W2, b2 = linear_init(d, h1, rng)
    W3, b3 = linear_init(config.num_classes, d, rng)
    if mode == "identity_start":
        W2[...] = 0
        b2[...] = 0
    return HeadParams(W1, b1, W2, b2, W3, b3)


def _check_inputs(p, m, params):
    if p.ndim != 2 or m.ndim != 2 or p.shape[0] != m.shape[0]:
        raise ShapeError(f"fusion head: p {p.shape} and m {m.shape} must be (N, D) and (N, M)")
    params.check(p.shape[1], m.shape[1])


def fuse_forward(p, m, params):
    """Return ``(logits, probs)`` for features ``p`` and metadata ``m``."""
    logits, _ = _fuse(p, m, params)
    return logits, nn.sigmoid(logits)


def _fuse(p, m, params):
    _check_inputs(p, m, params)
    z = nn.concat_features(p, m)
    a1 = nn.linear(z, params.W1, params.b1)
    h1 = nn.relu(a1)
    a2 = nn.linear(h1, params.W2, params.b2)
    h2 = nn.relu(a2)
    f = nn.elementwise_add(h2, p)
    logits = nn.linear(f, params.W3, params.b3)
    return logits, (z, a1, h1, a2, f)


def fuse_backward(dlogits, p, m, params):
    """Gradients ``(dp, dm, grads)`` where ``grads`` maps W1..b3 to arrays."""
    _, (z, a1, h1, a2, f) = _fuse(p, m, params)
    return _fuse_backward(dlogits, p, (z, a1, h1, a2, f), params)


def _fuse_backward(dlogits, p, cache, params):
    z, a1, h1, a2, f = cache
    df, dW3, db3 = nn.linear_backward(dlogits, f, params.W3)
    dh2, dp_skip = nn.elementwise_add_backward(df)
    da2 = nn.relu_backward(dh2, a2)
    dh1, dW2, db2 = nn.linear_backward(da2, h1, params.W2)
    da1 = nn.relu_backward(dh1, a1)
    dz, dW1, db1 = nn.linear_backward(da1, z, params.W1)
    dp_fc, dm = nn.concat_features_backward(dz, p.shape[1])
    grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2, "W3": dW3, "b3": db3}
    return dp_skip + dp_fc, dm, grads


def baseline_logits(p, params):
    return nn.linear(p, params.W3, params.b3)


def baseline_forward(p, params):
    """The image-only classifier the skip falls back to: ``sigmoid(W3 p + b3)``."""
    return nn.sigmoid(baseline_logits(p, params))


_PARAM_NAMES = {
    "W1": "fc1.weight",
    "b1": "fc1.bias",
    "W2": "fc2.weight",
    "b2": "fc2.bias",
    "W3": "classifier.weight",
    "b3": "classifier.bias",
}


class FusionHead(Module):
    """Module wrapper; ``use_metadata=False`` gives the image-only ablation."""

    def __init__(self, config, seed=0, mode="identity_start", *, use_metadata=True, name="head"):
        super().__init__(name)
        self.config = config
        self.use_metadata = use_metadata
        init = head_init(config, seed, mode)
        self._by_field = {f: self.param(suffix, getattr(init, f)) for f, suffix in _PARAM_NAMES.items()}

    @property
    def params(self):
        return HeadParams(**{f: p.value for f, p in self._by_field.items()})

    def forward(self, p, m, training=False):
        params = self.params
        self.p = p
        if not self.use_metadata:
            self.last_pattern = None
            return baseline_logits(p, params)
        logits, self.cache = _fuse(p, m, params)
        self.last_pattern = np.concatenate([(self.cache[1] > 0).ravel(), (self.cache[3] > 0).ravel()])
        return logits

    def backward(self, dlogits):
        params = self.params
        if not self.use_metadata:
            dp, dW3, db3 = nn.linear_backward(dlogits, self.p, params.W3)
            self._by_field["W3"].grad += dW3
            self._by_field["b3"].grad += db3
            return dp, None
        dp, dm, grads = _fuse_backward(dlogits, self.p, self.cache, params)
        for f, g in grads.items():
            self._by_field[f].grad += g
        return dp, dm


class FusionModel(Module):
    """Backbone plus fusion head, end to end."""

    def __init__(self, backbone, head):
        super().__init__("")
        self.backbone = self.add(backbone)
        self.head = self.add(head)

    @property
    def use_metadata(self):
        return self.head.use_metadata

    def forward(self, images, meta, training=False):
        p = extract_features(self.backbone, images, "train" if training else "eval")
        if meta is None:
            meta = np.zeros((images.shape[0], self.head.config.meta_dim), dtype=p.dtype)
        return self.head.forward(p, meta.astype(p.dtype, copy=False), training)

    def backward(self, dlogits):
        dp, _ = self.head.backward(dlogits)
        return self.backbone.backward(dp)

    def predict_proba(self, images, meta, batch_size=64):
        out = []
        for i in range(0, len(images), batch_size):
            out.append(nn.sigmoid(self.forward(images[i : i + batch_size], meta[i : i + batch_size])))
        if not out:
            return np.zeros((0, NUM_CLASSES), dtype=DTYPE)
        return np.concatenate(out)


def build_model(backbone_config, hidden1=512, meta_dim=6, seed=0, init_mode="identity_start", use_metadata=True):
    backbone = build_backbone(backbone_config, seed)
    config = HeadConfig(backbone.feature_dim, meta_dim, hidden1)
    # offset keeps head draws independent of the backbone stream
    head = FusionHead(config, seed + 1, init_mode, use_metadata=use_metadata)
    return FusionModel(backbone, head)

"""Densely connected convolutional backbone (DenseNet-BC layout)."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, MaxPool2d, Module, ReLU, Sequential

BOTTLENECK = 4


@dataclass(frozen=True)
class BackboneConfig:
    block_layers: tuple = (6, 12, 24, 16)
    growth_rate: int = 32
    init_channels: int = 64
    compression: float = 0.5
    variant_name: str = "densenet121"
    input_size: int = 224
    stem: str = "imagenet"  # 7x7/2 conv + 3x3/2 max pool; "small" is a single 3x3/1 conv

    def __post_init__(self):
        if not self.block_layers or any(int(n) < 1 for n in self.block_layers):
            raise ConfigError(f"block_layers must be non-empty positive counts, got {self.block_layers}")
        if self.growth_rate < 1 or self.init_channels < 1:
            raise ConfigError("growth_rate and init_channels must be >= 1")
        if not 0 < self.compression <= 1:
            raise ConfigError(f"compression must lie in (0, 1], got {self.compression}")
        if self.stem not in ("imagenet", "small"):
            raise ConfigError(f"unknown stem {self.stem!r}")

    @classmethod
    def variant(cls, name):
        if name == "densenet121":
            return cls()
        if name == "tiny":
            return cls((2, 2), 8, 16, 0.5, "tiny", 32, "small")
        raise ConfigError(f"unknown backbone variant {name!r}")

    @property
    def feature_dim(self):
        return channel_trace(self)[-1]


def channel_trace(config):
    """Channel count after the stem, then after every block and transition."""
    c = config.init_channels
    trace = [c]
    for i, n_layers in enumerate(config.block_layers):
        c += n_layers * config.growth_rate
        trace.append(c)
        if i < len(config.block_layers) - 1:
            c = int(np.floor(c * config.compression))
            trace.append(c)
    return trace


class DenseLayer(Sequential):
    """BN-ReLU-1x1 conv to 4k, BN-ReLU-3x3 conv to k."""

    def __init__(self, cin, k, *, name, rng):
        super().__init__(
            BatchNorm2d(cin, name=f"{name}.norm1"),
            ReLU(),
            Conv2d(cin, BOTTLENECK * k, 1, name=f"{name}.conv1", rng=rng),
            BatchNorm2d(BOTTLENECK * k, name=f"{name}.norm2"),
            ReLU(),
            Conv2d(BOTTLENECK * k, k, 3, padding=1, name=f"{name}.conv2", rng=rng),
            name=name,
        )
        self.growth_rate = k


class DenseBlock(Module):
    def __init__(self, cin, n_layers, k, *, name, rng):
        super().__init__(name)
        if n_layers < 1:
            raise ConfigError("a dense block needs at least one layer")
        self.in_channels = cin
        self.out_channels = cin + n_layers * k
        self.layers = [self.add(DenseLayer(cin + i * k, k, name=f"{name}.layer{i}", rng=rng)) for i in range(n_layers)]

    def forward(self, x, training=False):
        feats = x
        for layer in self.layers:
            feats = np.concatenate([feats, layer.forward(feats, training)], axis=1)
        return feats

    def backward(self, dout):
        dfeats = dout
        for layer in reversed(self.layers):
            k = layer.growth_rate
            dprev = dfeats[:, :-k] + layer.backward(np.ascontiguousarray(dfeats[:, -k:]))
            dfeats = dprev
        return dfeats


class Transition(Sequential):
    """BN-ReLU-1x1 conv (channel compression), then 2x2 average pool."""

    def __init__(self, cin, compression, *, name, rng):
        self.out_channels = int(np.floor(cin * compression))
        super().__init__(
            BatchNorm2d(cin, name=f"{name}.norm"),
            ReLU(),
            Conv2d(cin, self.out_channels, 1, name=f"{name}.conv", rng=rng),
            AvgPool2d(2, 2),
            name=name,
        )

    def forward(self, x, training=False):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"transition needs even spatial size, got {x.shape[2]}x{x.shape[3]}")
        return super().forward(x, training)


class Backbone(Sequential):
    def __init__(self, config, rng, name="backbone"):
        c0 = config.init_channels
        if config.stem == "imagenet":
            stem = Sequential(
                Conv2d(3, c0, 7, stride=2, padding=3, name=f"{name}.stem.conv", rng=rng),
                BatchNorm2d(c0, name=f"{name}.stem.norm"),
                ReLU(),
                MaxPool2d(3, 2, padding=1),
                name=f"{name}.stem",
            )
        else:
            stem = Sequential(
                Conv2d(3, c0, 3, padding=1, name=f"{name}.stem.conv", rng=rng),
                BatchNorm2d(c0, name=f"{name}.stem.norm"),
                ReLU(),
                name=f"{name}.stem",
            )
        stages = [stem]
        c = c0
        for i, n_layers in enumerate(config.block_layers, start=1):
            block = DenseBlock(c, n_layers, config.growth_rate, name=f"{name}.block{i}", rng=rng)
            stages.append(block)
            c = block.out_channels
            if i < len(config.block_layers):
                trans = Transition(c, config.compression, name=f"{name}.transition{i}", rng=rng)
                stages.append(trans)
                c = trans.out_channels
        stages += [BatchNorm2d(c, name=f"{name}.norm_final"), ReLU(), GlobalAvgPool()]
        super().__init__(*stages, name=name)
        self.config = config
        self.feature_dim = c


def build_backbone(config, seed=0):
    """Randomly initialised backbone; ``config`` may be a variant name."""
    if isinstance(config, str):
        config = BackboneConfig.variant(config)
    return Backbone(config, np.random.default_rng(seed))


def extract_features(backbone, images, mode="eval"):
    """Pooled feature vectors ``p`` of shape (N, D)."""
    size = backbone.config.input_size
    if images.ndim != 4 or images.shape[1:] != (3, size, size):
        raise ShapeError(f"{backbone.config.variant_name} expects (N, 3, {size}, {size}) images, got {images.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    return backbone.forward(images, training=mode == "train")

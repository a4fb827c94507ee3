"""Stateful layer wrappers around :mod:`chexfusion.nn`.

A module caches its forward input, and ``backward`` accumulates parameter
gradients into ``Param.grad`` and returns the input gradient. Parameter
names are fixed at construction so they can double as checkpoint keys.
"""

import numpy as np

from . import nn
from .nn import Param

DTYPE = np.float32


class Module:
    def __init__(self, name=""):
        self.name = name
        self._children = []
        self._params = []

    def add(self, module):
        self._children.append(module)
        return module

    def param(self, suffix, value):
        p = Param(f"{self.name}.{suffix}", value)
        self._params.append(p)
        return p

    def modules(self):
        yield self
        for child in self._children:
            yield from child.modules()

    def parameters(self):
        params = []
        for m in self.modules():
            params.extend(m._params)
        return params

    def buffers(self):
        """Non-trainable state, keyed by checkpoint name."""
        out = {}
        for m in self.modules():
            out.update(m.own_buffers())
        return out

    def own_buffers(self):
        return {}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for m in self.modules():
            m._cast(dtype)
        return self

    def _cast(self, dtype):
        for p in self._params:
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)

    def activation_pattern(self):
        """Discrete state of the last forward pass (ReLU masks, argmaxes)."""
        pattern = []
        for m in self.modules():
            last = getattr(m, "last_pattern", None)
            if last is not None:
                pattern.append(last)
        return pattern


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, *, name, rng):
        super().__init__(name)
        self.stride, self.padding = stride, padding
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = self.param("weight", (rng.standard_normal((cout, cin, k, k)) * std).astype(DTYPE))

    def forward(self, x, training=False):
        self.x = x
        out, self.cols = nn.conv2d_with_patches(x, self.weight.value, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw = nn.conv2d_backward(dout, self.x, self.weight.value, self.stride, self.padding, self.cols)
        self.cols = None
        self.weight.grad += dw
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels, *, name, momentum=0.1, eps=1e-5):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps
        self.weight = self.param("weight", np.ones(channels, dtype=DTYPE))
        self.bias = self.param("bias", np.zeros(channels, dtype=DTYPE))
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def own_buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def _cast(self, dtype):
        super()._cast(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def forward(self, x, training=False):
        self.x, self.mode = x, "train" if training else "eval"
        return nn.batch_norm(
            x, self.weight.value, self.bias.value, self.running_mean, self.running_var,
            self.mode, self.momentum, self.eps,
        )

    def backward(self, dout):
        dx, dgamma, dbeta = nn.batch_norm_backward(
            dout, self.x, self.weight.value, self.running_mean, self.running_var, self.mode, self.eps
        )
        self.weight.grad += dgamma
        self.bias.grad += dbeta
        return dx


class ReLU(Module):
    last_pattern = None

    def forward(self, x, training=False):
        self.x = x
        self.last_pattern = x > 0
        return nn.relu(x)

    def backward(self, dout):
        return nn.relu_backward(dout, self.x)


class MaxPool2d(Module):
    last_pattern = None

    def __init__(self, k, stride, padding=0, name=""):
        super().__init__(name)
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x, training=False):
        self.x = x
        self.last_pattern = nn.maxpool_argmax(x, self.k, self.k, self.stride, self.padding)
        return nn.pool(x, "max", self.k, self.k, self.stride, self.padding)

    def backward(self, dout):
        return nn.pool_backward(dout, self.x, "max", self.k, self.k, self.stride, self.padding)


class AvgPool2d(Module):
    def __init__(self, k, stride, name=""):
        super().__init__(name)
        self.k, self.stride = k, stride

    def forward(self, x, training=False):
        self.x = x
        return nn.pool(x, "avg", self.k, self.k, self.stride)

    def backward(self, dout):
        return nn.pool_backward(dout, self.x, "avg", self.k, self.k, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x, training=False):
        self.x = x
        return nn.global_avg_pool(x)

    def backward(self, dout):
        return nn.global_avg_pool_backward(dout, self.x)


class Sequential(Module):
    def __init__(self, *modules, name=""):
        super().__init__(name)
        for m in modules:
            self.add(m)

    def forward(self, x, training=False):
        for m in self._children:
            x = m.forward(x, training)
        return x

    def backward(self, dout):
        for m in reversed(self._children):
            dout = m.backward(dout)
        return dout


def linear_init(dout, din, rng):
    bound = np.sqrt(1.0 / din)
    w = rng.uniform(-bound, bound, size=(dout, din)).astype(DTYPE)
    b = rng.uniform(-bound, bound, size=dout).astype(DTYPE)
    return w, b

"""Stateful building blocks that cache their forward inputs for backward."""

import numpy as np

from . import tensor_core as tc
from .errors import GraphError


def _kaiming(rng, shape, gain, dtype):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * (gain / np.sqrt(fan_in))).astype(dtype)


def leaky_gain(slope):
    return float(np.sqrt(2.0 / (1.0 + slope * slope)))


class Layer:
    """Base class: owns ``Param`` objects and named buffers."""

    def __init__(self, name):
        self.name = name
        self._cache = None

    def params(self):
        return []

    def buffers(self):
        return {}

    def _take_cache(self):
        if self._cache is None:
            raise GraphError(f"backward called on {self.name!r} before forward")
        cache, self._cache = self._cache, None
        return cache


class Conv(Layer):
    """Plain convolution with bias (used for the 1x1 prediction head)."""

    def __init__(self, name, spec, rng, dtype, gain=1.0):
        super().__init__(name)
        self.spec = spec
        self.weight = tc.Param(f"{name}.conv.weight", _kaiming(rng, spec.weight_shape, gain, dtype))
        self.bias = tc.Param(f"{name}.conv.bias", np.zeros(spec.out_channels, dtype=dtype))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        self._cache = x
        return tc.conv2d(x, self.weight.value, self.bias.value, self.spec)

    def backward(self, g):
        x = self._take_cache()
        dx, dw, db = tc.conv2d_backward(g, x, self.weight.value, self.spec)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class ConvBNAct(Layer):
    """Conv -> BatchNorm -> LeakyReLU."""

    def __init__(self, name, spec, rng, dtype, slope=tc.LEAKY_SLOPE, bn_momentum=tc.BN_MOMENTUM, bn_eps=tc.BN_EPS):
        super().__init__(name)
        self.spec = spec
        self.slope = slope
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        c = spec.out_channels
        self.weight = tc.Param(f"{name}.conv.weight", _kaiming(rng, spec.weight_shape, leaky_gain(slope), dtype))
        self.bias = tc.Param(f"{name}.conv.bias", np.zeros(c, dtype=dtype))
        self.gamma = tc.Param(f"{name}.bn.gamma", np.ones(c, dtype=dtype))
        self.beta = tc.Param(f"{name}.bn.beta", np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def params(self):
        return [self.weight, self.bias, self.gamma, self.beta]

    def buffers(self):
        return {
            f"{self.name}.bn.running_mean": self.running_mean,
            f"{self.name}.bn.running_var": self.running_var,
        }

    def forward(self, x, training=False):
        z = tc.conv2d(x, self.weight.value, self.bias.value, self.spec)
        y, bn_cache = tc.batch_norm(
            z, self.gamma.value, self.beta.value, self.running_mean, self.running_var,
            training, self.bn_momentum, self.bn_eps,
        )
        self._cache = (x, bn_cache, y)
        return tc.leaky_relu(y, self.slope)

    def backward(self, g):
        x, bn_cache, y = self._take_cache()
        g = tc.leaky_relu_backward(g, y, self.slope)
        g, dgamma, dbeta = tc.batch_norm_backward(g, bn_cache)
        self.gamma.accumulate(dgamma)
        self.beta.accumulate(dbeta)
        dx, dw, db = tc.conv2d_backward(g, x, self.weight.value, self.spec)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class MaxPool(Layer):
    def __init__(self, name, kernel=2, stride=2, padding=0):
        super().__init__(name)
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x, training=False):
        out, arg = tc.max_pool2d(x, self.kernel, self.stride, self.padding)
        self._cache = (arg, x.shape)
        return out

    def backward(self, g):
        arg, shape = self._take_cache()
        return tc.max_pool2d_backward(g, arg, shape, self.kernel, self.stride, self.padding)


class Sequential(Layer):
    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class Inception(Layer):
    """Four parallel branches concatenated along channels.

    Branches: 1x1 | 1x1 -> 3x3 | 1x1 -> 5x5 | maxpool 3x3 (stride 1, pad 1) -> 1x1,
    each emitting ``out_channels // 4`` channels, in that order.
    """

    def __init__(self, name, in_channels, out_channels, rng, dtype, **block_kw):
        super().__init__(name)
        if out_channels % 4:
            raise ValueError(f"{name}: out_channels must be divisible by 4, got {out_channels}")
        q = out_channels // 4

        def cbr(suffix, cin, cout, k):
            spec = tc.ConvSpec(cin, cout, kernel=k, padding=k // 2)
            return ConvBNAct(f"{name}.{suffix}", spec, rng, dtype, **block_kw)

        self.branches = [
            Sequential(f"{name}.branch1", [cbr("branch1.0", in_channels, q, 1)]),
            Sequential(f"{name}.branch2", [cbr("branch2.0", in_channels, q, 1), cbr("branch2.1", q, q, 3)]),
            Sequential(f"{name}.branch3", [cbr("branch3.0", in_channels, q, 1), cbr("branch3.1", q, q, 5)]),
            Sequential(f"{name}.branch4", [MaxPool(f"{name}.branch4.pool", 3, 1, 1), cbr("branch4.1", in_channels, q, 1)]),
        ]
        self.out_channels = out_channels

    def params(self):
        return [p for b in self.branches for p in b.params()]

    def buffers(self):
        out = {}
        for b in self.branches:
            out.update(b.buffers())
        return out

    def forward(self, x, training=False):
        outs = [b.forward(x, training) for b in self.branches]
        self._cache = [o.shape[1] for o in outs]
        return tc.combine(outs, "concat_channels")

    def backward(self, g):
        sizes = self._take_cache()
        parts = tc.combine_backward(g, sizes, "concat_channels")
        dx = None
        for b, gp in zip(self.branches, parts):
            d = b.backward(np.ascontiguousarray(gp))
            dx = d if dx is None else dx + d
        return dx

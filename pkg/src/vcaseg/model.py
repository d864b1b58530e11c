"""The ventral-stream segmentation network: V1 -> V2 -> V4 -> IT -> decoder.

Spatial plan for an ``H x W`` input (224x192 by default):

====================  ============  ===========
stage                 resolution    channels
====================  ============  ===========
f1 (V1)               H x W         c1
f2 (V2 on pool f1)    H/2 x W/2     c2
f4 (V4)               H/4 x W/4     c4
bottleneck (IT)       H/8 x W/8     2 * t
decoder u1..u3        x2 each       decoder[0..2]
decoder u4 + head     H x W         decoder[3] -> 1
====================  ============  ===========
"""

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, GraphError, ShapeError
from .layers import Conv, ConvBNAct, Inception, MaxPool, Sequential

UPSAMPLE_KINDS = ("nearest", "bilinear")


@dataclass
class ModelConfig:
    input_hw: tuple = (224, 192)
    c1: int = 64
    c2: int = 128
    c4: int = 256
    t: int = 256
    decoder: tuple = (256, 128, 64, 32)
    leaky_slope: float = tc.LEAKY_SLOPE
    upsample_kind: str = "nearest"
    seed: int = 0
    bn_eps: float = tc.BN_EPS
    bn_momentum: float = tc.BN_MOMENTUM

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.decoder = tuple(int(v) for v in self.decoder)

    def validate(self):
        if len(self.input_hw) != 2 or any(v <= 0 or v % 8 for v in self.input_hw):
            raise ConfigError(f"input_hw must be two positive multiples of 8, got {self.input_hw}")
        for name in ("c1", "c2", "c4", "t"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("c1", "c2"):
            if getattr(self, name) % 4:
                raise ConfigError(f"{name} feeds a 4-branch block and must be divisible by 4")
        if len(self.decoder) != 4:
            raise ConfigError(f"decoder needs exactly 4 upsampling blocks, got {len(self.decoder)}")
        if any(c < 1 for c in self.decoder):
            raise ConfigError("decoder channel counts must be positive")
        if self.upsample_kind not in UPSAMPLE_KINDS:
            raise ConfigError(f"upsample_kind must be one of {UPSAMPLE_KINDS}")
        if self.leaky_slope < 0:
            raise ConfigError("leaky_slope must be non-negative")
        if self.bn_eps <= 0:
            raise ConfigError("bn_eps must be positive")
        return self

    def to_items(self):
        """Flat ``key -> str`` pairs, in field order (checkpoint/manifest form)."""
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_items(cls, items):
        kw = {}
        types = {f.name: f.default for f in fields(cls)}
        for k, v in items.items():
            if k not in types:
                continue
            default = types[k]
            if isinstance(default, tuple):
                kw[k] = tuple(int(x) for x in v.split(",") if x)
            elif isinstance(default, bool):
                kw[k] = v == "True"
            elif isinstance(default, int):
                kw[k] = int(v)
            elif isinstance(default, float):
                kw[k] = float(v)
            else:
                kw[k] = v
        return cls(**kw)


def small_config(input_hw=(16, 16), seed=0, **kw):
    """Reduced-width configuration used by the gradient and overfit checks."""
    return ModelConfig(input_hw=input_hw, c1=4, c2=8, c4=16, t=16, decoder=(16, 8, 8, 4), seed=seed, **kw)


@dataclass
class StageOutputs:
    f1: np.ndarray
    f2: np.ndarray
    f4: np.ndarray
    bottleneck: np.ndarray


@dataclass
class _Trace:
    """What the last forward needs for backward beyond the per-layer caches."""

    training: bool
    concat_sizes: dict = field(default_factory=dict)


class VcaNet:
    """Parameter set and fixed stage graph of the network.

    Use :func:`build` rather than calling the constructor directly.
    """

    def __init__(self, config, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        kw = dict(slope=config.leaky_slope, bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
        c1, c2, c4, t, dec = config.c1, config.c2, config.c4, config.t, config.decoder

        def cbr(name, cin, cout, k, stride=1, padding=None, dilation=1):
            pad = k // 2 if padding is None else padding
            spec = tc.ConvSpec(cin, cout, kernel=k, stride=stride, padding=pad, dilation=dilation)
            return ConvBNAct(name, spec, rng, self.dtype, **kw)

        self.v1 = Sequential("v1", [
            cbr("v1.block1", 1, c1, 3),
            cbr("v1.block2", c1, c1, 1),
            cbr("v1.block3", c1, c1, 3),
            Inception("v1.block4", c1, c1, rng, self.dtype, **kw),
            cbr("v1.block5", c1, c1, 3),
            cbr("v1.block6", c1, c1, 1),
        ])
        self.pool1 = MaxPool("pool1")
        self.v2 = Inception("v2", c1, c2, rng, self.dtype, **kw)
        self.pool2 = MaxPool("pool2")
        self.v4_branch1 = Sequential("v4.branch1", [cbr("v4.branch1.0", c2, c4, 3), cbr("v4.branch1.1", c4, c4, 1)])
        self.v4_branch2 = cbr("v4.branch2.0", c1, c4, 1)
        self.it_t1 = cbr("it.t1", c1, t, 5, stride=2, padding=2)
        self.it_t2 = cbr("it.t2", c2, t, 5, stride=2, padding=2)
        self.it_pool = MaxPool("it.pool")
        self.it_t4 = cbr("it.t4", c4, t, 3)
        self.it_dilated = cbr("it.dilated", t, t, 3, padding=2, dilation=2)
        self.up = [
            cbr("decoder.u1", 2 * t + c4, dec[0], 3),
            cbr("decoder.u2", dec[0] + c2, dec[1], 3),
            cbr("decoder.u3", dec[1] + c1, dec[2], 3),
            cbr("decoder.u4", dec[2], dec[3], 3),
        ]
        self.head = Conv("head", tc.ConvSpec(dec[3], 1, kernel=1), rng, self.dtype)
        self._layers = [
            self.v1, self.v2, self.v4_branch1, self.v4_branch2, self.it_t1, self.it_t2,
            self.it_t4, self.it_dilated, *self.up, self.head,
        ]
        self.params = {}
        for layer in self._layers:
            for p in layer.params():
                if p.name in self.params:
                    raise ConfigError(f"duplicate parameter name {p.name}")
                self.params[p.name] = p
        self.buffers = {}
        for layer in self._layers:
            self.buffers.update(layer.buffers())
        self._trace = None
        self.grad_trace = {}

    # ------------------------------------------------------------------
    def param_count(self):
        return int(sum(p.value.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        """Every array that defines the network: params then BN buffers."""
        out = {name: p.value for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def check_input(self, x):
        tc.check_rank4(x)
        if x.shape[1] != 1:
            raise ShapeError(f"network expects 1 input channel, got {x.shape[1]}", axis="channels")
        if tuple(x.shape[2:]) != self.config.input_hw:
            h, w = self.config.input_hw
            raise ShapeError(
                f"input resolution {x.shape[2]}x{x.shape[3]} does not match the model's {h}x{w}; "
                f"resize slices to {h}x{w} first",
                axis="height" if x.shape[2] != h else "width",
            )

    # ------------------------------------------------------------------
    def v1_forward(self, x, training=False):
        return self.v1.forward(x, training)

    def v2_forward(self, p1, training=False):
        return self.v2.forward(p1, training)

    def v4_forward(self, f2_pooled, f1, training=False):
        b1 = self.v4_branch1.forward(f2_pooled, training)
        factor = f1.shape[2] // f2_pooled.shape[2] if f2_pooled.shape[2] else 0
        if factor < 1 or f1.shape[2] != factor * f2_pooled.shape[2]:
            raise ShapeError("V4 inputs are not related by an integer downsampling factor", axis="height")
        b2 = self.v4_branch2.forward(tc.avg_pool2d(f1, factor), training)
        self._v4_factor = factor
        return tc.combine([b1, b2], "add")

    def it_bottleneck(self, f1, f2, f4, training=False):
        t1 = self.it_t1.forward(f1, training)
        t2 = self.it_t2.forward(f2, training)
        t4 = self.it_t4.forward(self.it_pool.forward(f4, training), training)
        m12 = tc.combine([_align(t1, t2), t2], "add")
        vm = tc.combine([_align(m12, t4), t4], "add")
        d = self.it_dilated.forward(t4, training)
        self._it_factors = (t1.shape[2] // t2.shape[2], m12.shape[2] // t4.shape[2])
        return tc.combine([vm, d], "concat_channels")

    def decode(self, bottleneck, f4, f2, f1, training=False):
        kind = self.config.upsample_kind
        x = bottleneck
        sizes = []
        for block, skip in zip(self.up[:3], (f4, f2, f1)):
            u = tc.upsample2(x, kind)
            sizes.append((u.shape[1], skip.shape[1]))
            x = block.forward(tc.combine([u, skip], "concat_channels"), training)
        x = self.up[3].forward(x, training)
        self._decode_sizes = sizes
        logits = self.head.forward(x, training)
        prob = tc.sigmoid(logits)
        self._prob = prob
        return prob

    def forward(self, x, training=False):
        """Run the whole graph; returns ``(prob_map, StageOutputs)``."""
        self.check_input(x)
        x = np.asarray(x, dtype=self.dtype)
        f1 = self.v1_forward(x, training)
        f2 = self.v2_forward(self.pool1.forward(f1, training), training)
        f4 = self.v4_forward(self.pool2.forward(f2, training), f1, training)
        b = self.it_bottleneck(f1, f2, f4, training)
        prob = self.decode(b, f4, f2, f1, training)
        self._trace = _Trace(training)
        return prob, StageOutputs(f1, f2, f4, b)

    def __call__(self, x, training=False):
        return self.forward(x, training)[0]

    # ------------------------------------------------------------------
    def backward(self, dprob):
        """Reverse pass from ``dL/dprob``; accumulates into every ``Param.grad``.

        Returns ``dL/dx``.  Per-route gradients reaching ``f1`` are kept in
        ``grad_trace`` for inspection.
        """
        if self._trace is None:
            raise GraphError("backward called before forward")
        self._trace = None
        kind = self.config.upsample_kind
        g = tc.sigmoid_backward(dprob.astype(self.dtype, copy=False), self._prob)
        g = self.head.backward(g)
        g = self.up[3].backward(g)
        skip_grads = []
        for block, sizes in zip(reversed(self.up[:3]), reversed(self._decode_sizes)):
            g = block.backward(g)
            gu, gskip = tc.combine_backward(g, sizes, "concat_channels")
            skip_grads.append(np.ascontiguousarray(gskip))
            g = tc.upsample2_backward(np.ascontiguousarray(gu), kind)
        df1_skip, df2, df4 = skip_grads
        df1_skip = df1_skip.copy()
        df2 = df2.copy()
        df4 = df4.copy()

        # IT bottleneck
        t = self.config.t
        gvm, gd = tc.combine_backward(g, [t, t], "concat_channels")
        gvm, gd = np.ascontiguousarray(gvm), np.ascontiguousarray(gd)
        f12, fm = self._it_factors
        dt4 = self.it_dilated.backward(gd)
        dt4 += gvm
        dm12 = tc.avg_pool2d_backward(gvm, fm)
        dt2 = dm12
        dt1 = tc.avg_pool2d_backward(dm12, f12)
        df4 += self.it_pool.backward(self.it_t4.backward(dt4))
        df2 += self.it_t2.backward(dt2)
        df1_it = self.it_t1.backward(dt1)

        # V4
        dp2 = self.v4_branch1.backward(df4)
        df1_v4 = tc.avg_pool2d_backward(self.v4_branch2.backward(df4), self._v4_factor)
        df2 += self.pool2.backward(dp2)

        # V2
        df1_v2 = self.pool1.backward(self.v2.backward(df2))

        df1 = df1_skip + df1_it + df1_v4 + df1_v2
        self.grad_trace = {
            "f1.skip": df1_skip,
            "f1.encoder": df1_it + df1_v4 + df1_v2,
            "f1": df1,
        }
        return self.v1.backward(df1)


def _align(big, small):
    """Average-pool ``big`` down to the spatial size of ``small``."""
    factor = big.shape[2] // small.shape[2]
    if factor * small.shape[2] != big.shape[2] or factor * small.shape[3] != big.shape[3]:
        raise ShapeError(f"cannot align {big.shape[2:]} to {small.shape[2:]}", axis="height")
    return big if factor == 1 else tc.avg_pool2d(big, factor)


def build(config=None, dtype=np.float32):
    """Build a network from ``config`` (validated before any allocation)."""
    config = ModelConfig() if config is None else config
    config.validate()
    return VcaNet(config, dtype)


def predict_mask(prob, threshold=0.5):
    """Binary mask ``prob > threshold`` as uint8."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(prob) > threshold).astype(np.uint8)


def to_dtype(net, dtype):
    """A copy of ``net`` with every array cast to ``dtype`` (e.g. float64 for gradient checks)."""
    other = VcaNet(net.config, dtype)
    for name, arr in net.state_arrays().items():
        target = other.params[name].value if name in other.params else other.buffers[name]
        target[...] = arr
    return other

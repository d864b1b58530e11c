"""Dense NCHW tensor primitives with hand-written gradients.

Every forward op here is a pure function of its arguments.  The matching
``*_backward`` function takes the upstream gradient plus whatever the
forward needed to keep, and returns gradients for each differentiable
input.  Arrays are plain ``numpy.ndarray`` objects of rank 4
``[batch, channel, height, width]``; dtype (float32 or float64) is
preserved by every op.

Convolutions loop over the batch so that a sample's result never depends
on which other samples share its batch.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_AXES = ("batch", "channels", "height", "width")


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def check_rank4(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 [N,C,H,W], got shape {x.shape}", axis="rank")
    if x.shape[0] == 0:
        raise ShapeError(f"{what} has an empty batch", axis="batch")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)

    def __post_init__(self):
        for f in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, f, _pair(getattr(self, f)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive", axis="channels")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ShapeError("kernel, stride and dilation must be positive")
        if min(self.padding) < 0:
            raise ShapeError("padding must be non-negative")

    def output_size(self, h, w):
        """Spatial output size; raises if either side would be empty."""
        out = []
        for n, k, s, p, d, axis in zip(
            (h, w), self.kernel, self.stride, self.padding, self.dilation, ("height", "width")
        ):
            o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise ShapeError(f"convolution leaves no output along {axis} (input {n})", axis=axis)
            out.append(o)
        return tuple(out)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel


class Param:
    """A named trainable array plus its accumulated gradient.

    ``grad`` is ``None`` until a backward pass deposits something; the
    optimizer treats ``None`` as "never reached".
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = value
        self.grad = None

    def accumulate(self, g):
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient for {self.name} has shape {g.shape}, expected {self.value.shape}")
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


# --------------------------------------------------------------------------
# convolution


def _tap_slice(spec, i, j, ho, wo):
    (sh, sw), (dh, dw) = spec.stride, spec.dilation
    r0, c0 = i * dh, j * dw
    return slice(r0, r0 + sh * (ho - 1) + 1, sh), slice(c0, c0 + sw * (wo - 1) + 1, sw)


def _check_conv(x, w, b, spec):
    check_rank4(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d expects {spec.in_channels} input channels, got {x.shape[1]}", axis="channels"
        )
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match {spec.weight_shape}", axis="weight")
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} does not match ({spec.out_channels},)", axis="bias")


def conv2d(x, w, b, spec):
    """2-D cross-correlation (no kernel flip) with stride, padding and dilation."""
    _check_conv(x, w, b, spec)
    n, cin, h, wd = x.shape
    ho, wo = spec.output_size(h, wd)
    (kh, kw), (ph, pw) = spec.kernel, spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # BLAS needs unit-stride taps
    out = np.empty((n, spec.out_channels, ho, wo), dtype=x.dtype)
    for s in range(n):
        acc = np.zeros((spec.out_channels, ho * wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                rs, cs = _tap_slice(spec, i, j, ho, wo)
                acc += wt[i, j] @ xp[s, :, rs, cs].reshape(cin, -1)
        if b is not None:
            acc += b[:, None]
        out[s] = acc.reshape(spec.out_channels, ho, wo)
    return out


def conv2d_backward(g, x, w, spec):
    """Gradients of :func:`conv2d` w.r.t. ``x``, ``w`` and ``b``."""
    n, cin, h, wd = x.shape
    ho, wo = g.shape[2:]
    (kh, kw), (ph, pw) = spec.kernel, spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    dxp = np.zeros(xp.shape, dtype=x.dtype)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    dwt = np.zeros((kh, kw, spec.out_channels, cin), dtype=w.dtype)
    for s in range(n):
        gs = g[s].reshape(spec.out_channels, -1)
        for i in range(kh):
            for j in range(kw):
                rs, cs = _tap_slice(spec, i, j, ho, wo)
                dwt[i, j] += gs @ xp[s, :, rs, cs].reshape(cin, -1).T
                dxp[s, :, rs, cs] += (wt[i, j] @ gs).reshape(cin, ho, wo)
    dw = np.ascontiguousarray(dwt.transpose(2, 3, 0, 1))
    db = g.sum(axis=(0, 2, 3))
    dx = dxp[:, :, ph : ph + h, pw : pw + wd] if ph or pw else dxp
    return np.ascontiguousarray(dx), dw, db


# --------------------------------------------------------------------------
# batch normalization


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization.

    In training mode the batch statistics over ``N*H*W`` are used and the
    running statistics are updated *in place* (exponential moving average,
    unbiased variance).  Returns ``(out, cache)``; the cache feeds
    :func:`batch_norm_backward`.
    """
    check_rank4(x)
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm {name} has shape {arr.shape}, expected ({c},)", axis="channels")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.size == 0:
        raise ShapeError("batch_norm on an empty tensor", axis="batch")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, training)


def batch_norm_backward(g, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, training = cache
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma[None, :, None, None]
    if training:
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        dx = (dxhat - mean_d - xhat * mean_dx) * inv_std[None, :, None, None]
    else:
        dx = dxhat * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# activations


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(g, x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, g, g * g.dtype.type(slope))


def sigmoid(x):
    """Overflow-free logistic function.

    Results are clipped to the open interval (0, 1) so downstream logs never
    see an exact 0 or 1 even when the input saturates the dtype.
    """
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    one = x.dtype.type(1)
    return np.clip(out, np.nextafter(x.dtype.type(0), one), np.nextafter(one, x.dtype.type(0)))


def sigmoid_backward(g, y):
    return g * y * (1 - y)


def activation(x, kind, slope=LEAKY_SLOPE):
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# pooling


def max_pool2d(x, kernel=2, stride=2, padding=0):
    """Max pooling; returns ``(out, argmax)``.

    ``argmax`` holds the winning tap index (row-major within the window,
    first index wins ties) and is what :func:`max_pool2d_backward` routes
    gradients through.
    """
    check_rank4(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"pooling window larger than input {h}x{w}", axis="height" if ho < 1 else "width")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if ph or pw else x
    taps = np.stack(
        [
            xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
            for i in range(kh)
            for j in range(kw)
        ]
    )
    arg = taps.argmax(axis=0)
    out = np.take_along_axis(taps, arg[None], axis=0)[0]
    return out, arg


def max_pool2d_backward(g, arg, in_shape, kernel=2, stride=2, padding=0):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = in_shape
    ho, wo = g.shape[2:]
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
    t = 0
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += np.where(arg == t, g, 0)
            t += 1
    return np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + w])


def avg_pool2d(x, factor=2):
    """Non-overlapping average pooling by an integer factor."""
    check_rank4(x)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial size {h}x{w} not divisible by pooling factor {factor}",
                         axis="height" if h % factor else "width")
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def avg_pool2d_backward(g, factor=2):
    scale = g.dtype.type(1.0 / (factor * factor))
    return np.repeat(np.repeat(g * scale, factor, axis=2), factor, axis=3)


def pool2d(x, kind="max", kernel=(2, 2), stride=(2, 2)):
    """2x2/stride-2 downsampling.  Max returns ``(out, argmax)``, avg returns ``out``."""
    if _pair(kernel) != (2, 2) or _pair(stride) != (2, 2):
        raise ValueError("pool2d supports only a 2x2 window with stride 2")
    check_rank4(x)
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"pool2d needs even spatial dims, got {h}x{w}", axis="height" if h % 2 else "width")
    if kind == "max":
        return max_pool2d(x, 2, 2, 0)
    if kind == "avg":
        return avg_pool2d(x, 2)
    raise ValueError(f"unknown pool kind {kind!r}")


# --------------------------------------------------------------------------
# upsampling


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic 1-D linear interpolation matrix, half-pixel centres.

    Source coordinate for output ``i`` is ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped at 0 on the low side; the upper neighbour is clamped at the edge.
    """
    a = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        a[i, lo] += 1.0 - frac
        a[i, hi] += frac
    return a.astype(dtype)


def upsample2(x, kind="nearest"):
    """Double both spatial dims by nearest-neighbour replication (or bilinear)."""
    check_rank4(x)
    if kind == "nearest":
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
    if kind == "bilinear":
        h, w = x.shape[2:]
        ah, aw = interp_matrix(h, 2 * h, x.dtype), interp_matrix(w, 2 * w, x.dtype)
        return np.einsum("ih,nchw,jw->ncij", ah, x, aw)
    raise ValueError(f"unknown upsample kind {kind!r}")


def upsample2_backward(g, kind="nearest"):
    n, c, h2, w2 = g.shape
    if kind == "nearest":
        return g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
    ah, aw = interp_matrix(h2 // 2, h2, g.dtype), interp_matrix(w2 // 2, w2, g.dtype)
    return np.einsum("ih,ncij,jw->nchw", ah, g, aw)


# --------------------------------------------------------------------------
# joins


def combine(xs, kind):
    """Concatenate along channels (``"concat_channels"``) or sum (``"add"``)."""
    if not xs:
        raise ValueError("combine needs at least one tensor")
    for x in xs:
        check_rank4(x)
    ref = xs[0].shape
    for x in xs[1:]:
        for ax, (a, b) in enumerate(zip(ref, x.shape)):
            if a != b and not (kind == "concat_channels" and ax == 1):
                raise ShapeError(f"{kind}: {_AXES[ax]} differs ({a} vs {b})", axis=_AXES[ax])
    if kind == "concat_channels":
        return np.concatenate(xs, axis=1)
    if kind == "add":
        out = xs[0].copy()
        for x in xs[1:]:
            out += x
        return out
    raise ValueError(f"unknown combine kind {kind!r}")


def combine_backward(g, sizes, kind):
    """Split/broadcast ``g`` back to the inputs; ``sizes`` are channel counts."""
    if kind == "concat_channels":
        return np.split(g, np.cumsum(sizes)[:-1], axis=1)
    return [g for _ in sizes]

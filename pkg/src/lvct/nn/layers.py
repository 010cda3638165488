"""Layers with hand-written forward/backward on ``(N, C, H, W)`` arrays.

Each functional op returns its output plus a cache; the matching
``*_backward`` takes the upstream gradient and the cache. The ``Module``
classes below wrap them and hold ``Param`` objects whose ``grad`` buffers
accumulate across backward calls until the optimizer zeroes them.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Param",
    "Module",
    "conv3x3",
    "conv3x3_backward",
    "maxpool2",
    "maxpool2_backward",
    "upconv2",
    "upconv2_backward",
    "leaky_relu",
    "leaky_relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "global_mean",
    "global_mean_backward",
    "concat_channels",
    "concat_channels_backward",
    "Conv3x3",
    "UpConv2",
    "MaxPool2",
    "LeakyReLU",
]

LEAKY_SLOPE = 0.01


class Param:
    """A trainable array and its accumulated gradient."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def _as4d(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------- conv 3x3


def conv3x3(x, w, b):
    """Stride-1, zero-pad-1 3x3 convolution. ``w`` is ``(out_c, in_c, 3, 3)``."""
    x, squeeze = _as4d(x)
    n, c, h, wd = x.shape
    oc, ic = w.shape[:2]
    if w.shape[2:] != (3, 3):
        raise ValueError(f"conv3x3 weight must be (out,in,3,3), got {w.shape}")
    if c != ic:
        raise ValueError(f"conv3x3 expects {ic} input channels, got {c}")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * 9, n * h * wd)
    out = w.reshape(oc, c * 9) @ cols
    out += b[:, None]
    out = np.ascontiguousarray(out.reshape(oc, n, h, wd).transpose(1, 0, 2, 3))
    if squeeze:
        out = out[0]
    return out, (cols, x.shape, w, squeeze)


def conv3x3_backward(gout, cache):
    """Returns ``(dx, dw, db)``."""
    cols, xshape, w, squeeze = cache
    if squeeze:
        gout = gout[None]
    n, c, h, wd = xshape
    oc = w.shape[0]
    g = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(oc, n * h * wd)
    dw = (g @ cols.T).reshape(w.shape)
    db = g.sum(axis=1)
    dcols = (w.reshape(oc, c * 9).T @ g).reshape(c, 3, 3, n, h, wd)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=gout.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + h, kj:kj + wd] += dcols[:, ki, kj].transpose(1, 0, 2, 3)
    dx = dxp[:, :, 1:-1, 1:-1]
    if squeeze:
        dx = dx[0]
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------- max pool


def maxpool2(x):
    """2x2 / stride 2 max pool. Ties go to the first position in row-major order."""
    x, squeeze = _as4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]
    return out, (idx, x.shape, squeeze)


def maxpool2_backward(gout, cache):
    idx, xshape, squeeze = cache
    if squeeze:
        gout = gout[None]
    n, c, h, w = xshape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=gout.dtype)
    np.put_along_axis(blocks, idx[..., None], gout[..., None], axis=-1)
    dx = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    if squeeze:
        dx = dx[0]
    return dx


# ---------------------------------------------------------------- transposed conv


def upconv2(x, w, b):
    """Transposed 2x2 convolution with stride 2. ``w`` is ``(in_c, out_c, 2, 2)``."""
    x, squeeze = _as4d(x)
    n, c, h, wd = x.shape
    ic, oc = w.shape[:2]
    if w.shape[2:] != (2, 2):
        raise ValueError(f"upconv2 weight must be (in,out,2,2), got {w.shape}")
    if c != ic:
        raise ValueError(f"upconv2 expects {ic} input channels, got {c}")
    xm = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * wd)
    wm = w.reshape(c, oc * 4)
    y = (wm.T @ xm).reshape(oc, 2, 2, n, h, wd)
    out = np.ascontiguousarray(y.transpose(3, 0, 4, 1, 5, 2)).reshape(n, oc, 2 * h, 2 * wd)
    out += b[None, :, None, None]
    if squeeze:
        out = out[0]
    return out, (xm, x.shape, w, squeeze)


def upconv2_backward(gout, cache):
    xm, xshape, w, squeeze = cache
    if squeeze:
        gout = gout[None]
    n, c, h, wd = xshape
    oc = w.shape[1]
    g = np.ascontiguousarray(
        gout.reshape(n, oc, h, 2, wd, 2).transpose(1, 3, 5, 0, 2, 4)
    ).reshape(oc * 4, n * h * wd)
    wm = w.reshape(c, oc * 4)
    dw = (xm @ g.T).reshape(w.shape)
    db = gout.sum(axis=(0, 2, 3))
    dx = np.ascontiguousarray((wm @ g).reshape(c, n, h, wd).transpose(1, 0, 2, 3))
    if squeeze:
        dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------- pointwise


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    pos = x > 0
    return np.where(pos, x, slope * x), (pos, slope)


def leaky_relu_backward(gout, cache):
    pos, slope = cache
    return np.where(pos, gout, slope * gout)


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y, y


def sigmoid_backward(gout, y):
    return gout * y * (1.0 - y)


def global_mean(x):
    """Mean over every axis but the batch axis of a 4-D tensor (all axes otherwise)."""
    if x.ndim == 4:
        return x.mean(axis=(1, 2, 3)), x.shape
    return np.asarray(x.mean()), x.shape


def global_mean_backward(gout, shape):
    if len(shape) == 4:
        count = shape[1] * shape[2] * shape[3]
        return np.broadcast_to(gout[:, None, None, None] / count, shape).copy()
    return np.full(shape, gout / np.prod(shape))


def concat_channels(a, b):
    """Concatenate along the channel axis (axis -3)."""
    if a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ValueError(f"cannot concat {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=-3), a.shape[-3]


def concat_channels_backward(gout, split):
    return gout[..., :split, :, :], gout[..., split:, :, :]


# ---------------------------------------------------------------- modules


class Module:
    def params(self) -> list[Param]:
        return []

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def __call__(self, x):
        return self.forward(x)


def he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3x3(Module):
    def __init__(self, in_c, out_c, rng, name="conv", dtype=np.float32, zero=False):
        self.in_c, self.out_c = in_c, out_c
        shape = (out_c, in_c, 3, 3)
        w = np.zeros(shape, dtype) if zero else he_uniform(rng, shape, in_c * 9, dtype)
        self.w = Param(w, f"{name}.w")
        self.b = Param(np.zeros(out_c, dtype), f"{name}.b")
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        out, self._cache = conv3x3(x, self.w.value, self.b.value)
        return out

    def backward(self, gout):
        dx, dw, db = conv3x3_backward(gout, self._cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class UpConv2(Module):
    def __init__(self, in_c, out_c, rng, name="upconv", dtype=np.float32):
        self.in_c, self.out_c = in_c, out_c
        shape = (in_c, out_c, 2, 2)
        self.w = Param(he_uniform(rng, shape, in_c, dtype), f"{name}.w")
        self.b = Param(np.zeros(out_c, dtype), f"{name}.b")
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        out, self._cache = upconv2(x, self.w.value, self.b.value)
        return out

    def backward(self, gout):
        dx, dw, db = upconv2_backward(gout, self._cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class MaxPool2(Module):
    def forward(self, x):
        out, self._cache = maxpool2(x)
        return out

    def backward(self, gout):
        return maxpool2_backward(gout, self._cache)


class LeakyReLU(Module):
    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x):
        out, self._cache = leaky_relu(x, self.slope)
        return out

    def backward(self, gout):
        return leaky_relu_backward(gout, self._cache)

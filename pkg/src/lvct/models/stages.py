"""The three restoration stages as differentiable wrappers around AE blocks.

An *AE block* is anything with ``forward(x) -> (N, 1, H, W)``,
``backward(g) -> dx`` and ``params()``; a :class:`~lvct.models.unet.UNet`
normally, or a stub in tests.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .unet import Discriminator, NetSpec, UNet

__all__ = [
    "CropMethod",
    "PadRecord",
    "pad_reflect",
    "unpad",
    "pad_reflect_backward",
    "build_aae",
    "SliceWindow",
    "clamped_windows",
    "SingleSlice",
    "SinogramCompletion",
    "SpatialAAE",
    "PatchRefiner",
    "crop_corners",
    "assemble_corners",
    "random_crops",
    "IdentityBlock",
    "ChannelMeanBlock",
]


class CropMethod(enum.Enum):
    RANDOM = "random"
    CORNER = "corner"
    CORNER_FLIP = "corner_flip"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).lower().replace("-", "_").replace("+", "_"))


@dataclass(frozen=True)
class PadRecord:
    bottom: int
    right: int


def pad_reflect(x, multiple: int = 16):
    """Reflect-pad the last two axes on the bottom/right up to ``multiple``."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    rec = PadRecord(ph, pw)
    if ph == 0 and pw == 0:
        return x, rec
    if ph:
        x = np.take(x, _pad_index(h, ph), axis=-2)
    if pw:
        x = np.take(x, _pad_index(w, pw), axis=-1)
    return x, rec


def unpad(x, rec: PadRecord):
    h, w = x.shape[-2:]
    return x[..., : h - rec.bottom, : w - rec.right]


def _pad_index(n, extra):
    mode = "reflect" if extra < n else "symmetric"
    return np.pad(np.arange(n), (0, extra), mode=mode)


def pad_reflect_backward(g, rec: PadRecord):
    """Adjoint of :func:`pad_reflect`: fold padded-region gradients back onto their sources."""
    hp, wp = g.shape[-2:]
    h, w = hp - rec.bottom, wp - rec.right
    if rec.bottom:
        out = np.zeros(g.shape[:-2] + (h, wp), g.dtype)
        np.add.at(out, (..., _pad_index(h, rec.bottom), slice(None)), g)
        g = out
    if rec.right:
        out = np.zeros(g.shape[:-1] + (w,), g.dtype)
        np.add.at(out, (..., _pad_index(w, rec.right)), g)
        g = out
    return g


def build_aae(in_channels: int = 1, width: int = 32, seed=0, dtype=np.float32, residual=True):
    """Autoencoder and discriminator built from the stage-one layer table."""
    ae = UNet(NetSpec(in_channels, width, residual), seed=seed, dtype=dtype)
    dis = Discriminator(1, width, seed=seed + 7919, dtype=dtype)
    return ae, dis


class IdentityBlock:
    """Returns the middle input channel; no parameters."""

    def params(self):
        return []

    def forward(self, x):
        self._c = x.shape[1]
        mid = x.shape[1] // 2
        return x[:, mid:mid + 1].copy()

    def backward(self, g):
        out = np.zeros(g.shape[:1] + (self._c,) + g.shape[2:], g.dtype)
        out[:, self._c // 2] = g[:, 0]
        return out


class ChannelMeanBlock:
    def params(self):
        return []

    def forward(self, x):
        self._c = x.shape[1]
        return x.mean(axis=1, keepdims=True)

    def backward(self, g):
        return np.repeat(g / self._c, self._c, axis=1)


class _Padded:
    """Applies an AE block to reflect-padded input and crops the result.

    ``backward`` returns the exact input gradient, folding the padded
    margin back through the reflection.
    """

    def __init__(self, block, multiple=16):
        self.block = block
        self.multiple = multiple

    def params(self):
        return self.block.params()

    def _forward_block(self, x):
        xp, self._rec = pad_reflect(x, self.multiple)
        return unpad(self.block.forward(xp), self._rec)

    def _backward_block(self, g):
        widths = [(0, 0)] * (g.ndim - 2) + [(0, self._rec.bottom), (0, self._rec.right)]
        return self.block.backward(np.pad(g, widths))


class SingleSlice(_Padded):
    """One AE block on ``(N, C, H, W)`` input, output ``(N, 1, H, W)``."""

    def forward(self, x):
        return self._forward_block(x)

    def backward(self, g):
        return pad_reflect_backward(self._backward_block(g), self._rec)


class SinogramCompletion(_Padded):
    """Stage one: the block predicts a full sinogram; only masked views are taken from it.

    ``valid`` marks the measured angle columns, which pass through unchanged.
    """

    def __init__(self, block, valid, multiple=16):
        super().__init__(block, multiple)
        self.valid = np.asarray(valid, dtype=bool)

    def forward(self, x):
        pred = self._forward_block(x)
        out = pred.copy()
        out[..., self.valid] = x[..., self.valid]
        return out

    def backward(self, g):
        g_in = g
        g = g.copy()
        g[..., self.valid] = 0
        gx = pad_reflect_backward(self._backward_block(g), self._rec)
        gx[..., self.valid] += g_in[..., self.valid]
        return gx


@dataclass
class SliceWindow:
    """Five consecutive slices centred on ``center``."""

    slices: np.ndarray  # (5, H, W)
    center: int = 2

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 3 or self.slices.shape[0] != 5:
            raise ValueError("a slice window holds exactly five equal-size slices")

    def triplets(self):
        s = self.slices
        return [s[0:3], s[1:4], s[2:5]]


def clamped_windows(volume: np.ndarray) -> np.ndarray:
    """All five-slice windows of ``(S, H, W)``, edges replicated; ``(S, 5, H, W)``."""
    n = volume.shape[0]
    idx = np.clip(np.arange(n)[:, None] + np.arange(-2, 3)[None, :], 0, n - 1)
    return volume[idx]


class SpatialAAE(_Padded):
    """Two-level cascade ``G2(G1(S1), G1(S2), G1(S3))`` over a five-slice window.

    ``first`` is shared across the three overlapping triplets; input is
    ``(N, 5, H, W)``.
    """

    def __init__(self, first, second, multiple=16):
        super().__init__(first, multiple)
        self.first = first
        self.second = second

    def params(self):
        return self.first.params() + self.second.params()

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 5:
            raise ValueError(f"spatial stage expects (N,5,H,W), got {x.shape}")
        n = x.shape[0]
        trip = np.stack([x[:, 0:3], x[:, 1:4], x[:, 2:5]], axis=1)  # n, 3, 3, h, w
        xp, self._rec = pad_reflect(trip.reshape((3 * n, 3) + x.shape[2:]), self.multiple)
        level1 = self.first.forward(xp)  # 3n, 1, H', W'
        mid = level1.reshape((n, 3) + level1.shape[2:])
        out = self.second.forward(mid)
        return unpad(out, self._rec)

    def backward(self, g):
        widths = [(0, 0), (0, 0), (0, self._rec.bottom), (0, self._rec.right)]
        gp = np.pad(g, widths)
        gmid = self.second.backward(gp)
        n = gmid.shape[0]
        g1 = self.first.backward(gmid.reshape((3 * n, 1) + gmid.shape[2:]))
        g1 = pad_reflect_backward(g1, self._rec).reshape((n, 3, 3) + g.shape[2:])
        gx = np.zeros((n, 5) + g.shape[2:], g1.dtype)
        for k in range(3):
            gx[:, k:k + 3] += g1[:, k]
        return gx


# ---------------------------------------------------------------- patches


def crop_corners(img, flip: bool = False):
    """Four half-size corner patches of ``(N, C, H, W)`` as ``(4N, C, H/2, W/2)``.

    Order per image: top-left, top-right, bottom-left, bottom-right. With
    ``flip`` each patch is mirrored so the image centre lands on its
    bottom-right corner.
    """
    n, c, h, w = img.shape
    if h % 2 or w % 2:
        raise ValueError(f"patch refinement needs even dims, got {h}x{w}")
    hh, hw = h // 2, w // 2
    p = np.stack(
        [img[:, :, :hh, :hw], img[:, :, :hh, hw:], img[:, :, hh:, :hw], img[:, :, hh:, hw:]],
        axis=1,
    )
    if flip:
        p = p.copy()
        p[:, 1] = p[:, 1, :, :, ::-1]
        p[:, 2] = p[:, 2, :, ::-1, :]
        p[:, 3] = p[:, 3, :, ::-1, ::-1]
    return p.reshape(4 * n, c, hh, hw)


def assemble_corners(patches, flip: bool = False):
    """Inverse of :func:`crop_corners`."""
    m, c, hh, hw = patches.shape
    n = m // 4
    p = patches.reshape(n, 4, c, hh, hw)
    if flip:
        p = p.copy()
        p[:, 1] = p[:, 1, :, :, ::-1]
        p[:, 2] = p[:, 2, :, ::-1, :]
        p[:, 3] = p[:, 3, :, ::-1, ::-1]
    out = np.empty((n, c, 2 * hh, 2 * hw), patches.dtype)
    out[:, :, :hh, :hw] = p[:, 0]
    out[:, :, :hh, hw:] = p[:, 1]
    out[:, :, hh:, :hw] = p[:, 2]
    out[:, :, hh:, hw:] = p[:, 3]
    return out


def random_crops(rng, img, target):
    """Four random half-size patches per image (same positions in ``img`` and ``target``)."""
    n, c, h, w = img.shape
    hh, hw = h // 2, w // 2
    xs, ys = [], []
    for i in range(n):
        for _ in range(4):
            r = int(rng.integers(0, h - hh + 1))
            q = int(rng.integers(0, w - hw + 1))
            xs.append(img[i, :, r:r + hh, q:q + hw])
            ys.append(target[i, :, r:r + hh, q:q + hw])
    return np.stack(xs), np.stack(ys)


class PatchRefiner(_Padded):
    """Stage three on whole images: corner patches through the block, then reassembled.

    Random cropping has no exact inverse, so inference always tiles corners;
    ``method`` only decides whether corner patches are flipped.
    """

    def __init__(self, block, method=CropMethod.CORNER, multiple=16):
        super().__init__(block, multiple)
        self.method = CropMethod.parse(method)

    @property
    def flip(self):
        return self.method is CropMethod.CORNER_FLIP

    def forward(self, x):
        patches = crop_corners(x, self.flip)
        out = self._forward_block(patches)
        return assemble_corners(out, self.flip)

    def backward(self, g):
        gp = crop_corners(g, self.flip)
        gx = pad_reflect_backward(self._backward_block(gp), self._rec)
        return assemble_corners(gx, self.flip)

"""Parallel-beam tomography: Radon projection, FBP and SART-TV.

Geometry conventions (shared by every routine here):

* image pixel ``(row, col)`` sits at ``x = col - (W-1)/2``, ``y = row - (H-1)/2``
* detector bin ``k`` sits at signed offset ``s = k - (n_det-1)/2``
* the ray for ``(s, theta)`` is ``{x cos(theta) + y sin(theta) = s}``; it is
  sampled at unit steps along ``(-sin(theta), cos(theta))`` with bilinear
  interpolation, zero outside the image.

Sinogram data is laid out ``(n_detectors, n_angles)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "FilterKind",
    "Sinogram",
    "SartTvConfig",
    "SartTvResult",
    "default_angles",
    "radon_forward",
    "ramp_response",
    "filter_padded",
    "apply_filter",
    "backproject",
    "fbp_reconstruct",
    "sart_tv_reconstruct",
    "tv_smoothed_grad",
]


class FilterKind(enum.Enum):
    RAM_LAK = "ramlak"
    SHEPP_LOGAN = "shepplogan"
    HANN = "hann"

    @classmethod
    def parse(cls, value: "FilterKind | str") -> "FilterKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown filter kind {value!r}")


def default_angles(n_angles: int = 180) -> np.ndarray:
    """One view per ``180/n_angles`` degrees over [0, 180)."""
    return np.arange(n_angles) * (180.0 / n_angles)


@dataclass
class Sinogram:
    """Line integrals, ``data[k, j]`` for detector ``k`` at ``angles[j]`` degrees."""

    data: np.ndarray
    angles: np.ndarray = field(default_factory=default_angles)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"sinogram data must be 2-D, got shape {self.data.shape}")
        if self.data.shape[1] != self.angles.size:
            raise ValueError(
                f"data has {self.data.shape[1]} angle columns but {self.angles.size} angles given"
            )
        if self.angles.size > 1 and np.any(np.diff(self.angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if self.angles.size and (self.angles[0] < 0 or self.angles[-1] >= 180):
            raise ValueError("angles must lie in [0, 180)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram contains non-finite values")

    @property
    def n_detectors(self) -> int:
        return self.data.shape[0]

    @property
    def n_angles(self) -> int:
        return self.angles.size

    def copy(self) -> "Sinogram":
        return Sinogram(self.data.copy(), self.angles.copy())


@dataclass(frozen=True)
class SartTvConfig:
    n_iterations: int = 50
    relaxation: float = 1.0
    tv_weight: float = 1.0
    tv_inner_steps: int = 10
    tv_step_size: float = 1e-3

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not 0 < self.relaxation <= 2:
            raise ValueError("relaxation must lie in (0, 2]")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.tv_inner_steps < 0:
            raise ValueError("tv_inner_steps must be >= 0")
        if self.tv_step_size <= 0:
            raise ValueError("tv_step_size must be > 0")


# --------------------------------------------------------------------------
# projection


def _ray_samples(shape: tuple[int, int], theta_deg: float, n_det: int):
    """Bilinear sample footprint of every ray at one angle.

    Returns ``(index, weight)``, both ``(n_det, n_steps * 4)``: flat pixel
    indices and interpolation weights. Out-of-image taps carry weight 0.
    """
    h, w = shape
    theta = np.deg2rad(theta_deg)
    c, s_ = np.cos(theta), np.sin(theta)
    n_steps = int(np.ceil(np.hypot(h, w))) + 2
    t = np.arange(n_steps) - (n_steps - 1) / 2.0
    det = np.arange(n_det) - (n_det - 1) / 2.0
    x = det[:, None] * c - t[None, :] * s_
    y = det[:, None] * s_ + t[None, :] * c
    col = x + (w - 1) / 2.0
    row = y + (h - 1) / 2.0
    c0 = np.floor(col)
    r0 = np.floor(row)
    fc = col - c0
    fr = row - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)

    idx = []
    wts = []
    for dr, dc, wt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx.append(np.where(inside, rr * w + cc, 0))
        wts.append(np.where(inside, wt, 0.0))
    index = np.concatenate(idx, axis=1)
    weight = np.concatenate(wts, axis=1)
    return index, weight


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    return image


def radon_forward(image: np.ndarray, angles=None, n_detectors: int | None = None) -> Sinogram:
    """Parallel-beam line integrals of ``image`` at ``angles`` (degrees).

    The transform is linear in ``image``; the result has the image dtype
    promoted to at least float32.
    """
    image = _check_image(image)
    angles = default_angles() if angles is None else np.asarray(angles, dtype=np.float64)
    if angles.size == 0:
        raise ValueError("angle list is empty")
    if n_detectors is None:
        n_detectors = max(image.shape)
    dtype = np.result_type(image.dtype, np.float32)
    flat = image.astype(dtype, copy=False).ravel()
    out = np.empty((n_detectors, angles.size), dtype=dtype)
    for j, theta in enumerate(angles):
        index, weight = _ray_samples(image.shape, theta, n_detectors)
        out[:, j] = np.sum(flat[index] * weight.astype(dtype, copy=False), axis=1)
    return Sinogram(out, angles)


def _projection_matrix(shape, theta_deg, n_det) -> sp.csr_matrix:
    index, weight = _ray_samples(shape, theta_deg, n_det)
    rows = np.repeat(np.arange(n_det), index.shape[1])
    mat = sp.coo_matrix(
        (weight.ravel(), (rows, index.ravel())), shape=(n_det, shape[0] * shape[1])
    )
    return mat.tocsr()


# --------------------------------------------------------------------------
# filtering and FBP


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def ramp_response(n_pad: int, kind: FilterKind | str = FilterKind.RAM_LAK) -> np.ndarray:
    """Frequency response (length ``n_pad``, FFT order) of the windowed ramp.

    Built as the DFT of the discrete Ram-Lak kernel (1/4 at 0, zero at even
    offsets, ``-1/(pi k)^2`` at odd offsets) with the DC bin set to exactly 0.
    """
    kind = FilterKind.parse(kind)
    n = np.concatenate([np.arange(0, n_pad // 2 + 1), np.arange(-(n_pad // 2) + 1, 0)])
    kernel = np.zeros(n_pad)
    kernel[0] = 0.25
    odd = n % 2 == 1
    kernel[odd] = -1.0 / (np.pi * n[odd]) ** 2
    response = np.real(np.fft.fft(kernel))
    response[0] = 0.0
    freq = np.fft.fftfreq(n_pad)
    if kind is FilterKind.SHEPP_LOGAN:
        response *= np.sinc(freq)
    elif kind is FilterKind.HANN:
        response *= 0.5 * (1.0 + np.cos(2.0 * np.pi * freq))
    return response


def filter_padded(data: np.ndarray, kind: FilterKind | str = FilterKind.RAM_LAK) -> np.ndarray:
    """Ramp-filter each column of ``data`` along axis 0 without cropping.

    Columns are zero-padded to the next power of two >= ``2 * n_detectors``;
    the full padded result is returned.
    """
    data = np.asarray(data, dtype=np.float64)
    n_det = data.shape[0]
    if n_det < 2:
        raise ValueError("filtering needs at least 2 detectors")
    n_pad = _next_pow2(2 * n_det)
    padded = np.zeros((n_pad,) + data.shape[1:])
    padded[:n_det] = data
    spectrum = np.fft.fft(padded, axis=0) * ramp_response(n_pad, kind)[:, None]
    return np.real(np.fft.ifft(spectrum, axis=0))


def apply_filter(sino: Sinogram, kind: FilterKind | str = FilterKind.RAM_LAK) -> Sinogram:
    filtered = filter_padded(sino.data, kind)[: sino.n_detectors]
    return Sinogram(filtered, sino.angles)


def backproject(data: np.ndarray, angles, out_w: int, out_h: int) -> np.ndarray:
    """Pixel-driven backprojection with linear interpolation along detectors.

    Pixels that project outside the detector row receive nothing. Angles are
    accumulated in order so the sum is reproducible.
    """
    data = np.asarray(data, dtype=np.float64)
    n_det = data.shape[0]
    xs = np.arange(out_w) - (out_w - 1) / 2.0
    ys = np.arange(out_h) - (out_h - 1) / 2.0
    x, y = np.meshgrid(xs, ys)
    out = np.zeros((out_h, out_w))
    centre = (n_det - 1) / 2.0
    for j, theta in enumerate(np.deg2rad(np.asarray(angles, dtype=np.float64))):
        pos = x * np.cos(theta) + y * np.sin(theta) + centre
        k0 = np.floor(pos).astype(np.int64)
        frac = pos - k0
        col = data[:, j]
        lo_ok = (k0 >= 0) & (k0 < n_det)
        hi_ok = (k0 + 1 >= 0) & (k0 + 1 < n_det)
        lo = np.where(lo_ok, col[np.clip(k0, 0, n_det - 1)], 0.0)
        hi = np.where(hi_ok, col[np.clip(k0 + 1, 0, n_det - 1)], 0.0)
        out += (1.0 - frac) * lo + frac * hi
    return out


def fbp_reconstruct(
    sino: Sinogram,
    kind: FilterKind | str = FilterKind.RAM_LAK,
    out_w: int | None = None,
    out_h: int | None = None,
) -> np.ndarray:
    """Filtered backprojection onto an ``out_h x out_w`` grid (default square, side n_detectors)."""
    if sino.n_angles < 2:
        raise ValueError("FBP needs at least 2 angles")
    out_w = sino.n_detectors if out_w is None else out_w
    out_h = out_w if out_h is None else out_h
    filtered = apply_filter(sino, kind)
    image = backproject(filtered.data, sino.angles, out_w, out_h)
    return image * (np.pi / sino.n_angles)


# --------------------------------------------------------------------------
# SART-TV


def tv_smoothed_grad(image: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Gradient of ``sum sqrt(dx^2 + dy^2 + eps)`` with forward differences."""
    dx = np.zeros_like(image)
    dy = np.zeros_like(image)
    dx[:, :-1] = image[:, 1:] - image[:, :-1]
    dy[:-1, :] = image[1:, :] - image[:-1, :]
    mag = np.sqrt(dx * dx + dy * dy + eps)
    px = dx / mag
    py = dy / mag
    grad = -(px + py)
    grad[:, 1:] += px[:, :-1]
    grad[1:, :] += py[:-1, :]
    return grad


@dataclass
class SartTvResult:
    image: np.ndarray
    residuals: list[float]


def sart_tv_reconstruct(
    sino,
    cfg: SartTvConfig | None = None,
    out_w: int | None = None,
    out_h: int | None = None,
    return_residuals: bool = False,
):
    """SART sweeps over the valid views, each followed by TV descent and a
    non-negativity clamp.

    ``sino`` is a :class:`Sinogram` or a masked sinogram (anything with
    ``.sino`` and ``.mask``); only valid angles take part. With
    ``return_residuals`` a :class:`SartTvResult` carrying the per-sweep data
    RMSE over valid rays is returned instead of the bare image.
    """
    cfg = cfg or SartTvConfig()
    if hasattr(sino, "mask"):
        valid = np.asarray(sino.mask.valid, dtype=bool)
        sino = sino.sino
    else:
        valid = np.ones(sino.n_angles, dtype=bool)
    if not valid.any():
        raise ValueError("no valid angles to reconstruct from")
    out_w = sino.n_detectors if out_w is None else out_w
    out_h = out_w if out_h is None else out_h
    shape = (out_h, out_w)
    n_det = sino.n_detectors

    views = np.flatnonzero(valid)
    mats = [_projection_matrix(shape, sino.angles[j], n_det) for j in views]
    mats_t = [m.T.tocsr() for m in mats]
    row_sums = [np.asarray(m.sum(axis=1)).ravel() for m in mats]
    col_sums = [np.asarray(m.sum(axis=0)).ravel() for m in mats]
    measured = [np.asarray(sino.data[:, j], dtype=np.float64) for j in views]

    x = np.zeros(shape[0] * shape[1])
    residuals = []
    tv_step = cfg.tv_step_size * cfg.tv_weight
    for _ in range(cfg.n_iterations):
        for m, mt, rs, cs, b in zip(mats, mats_t, row_sums, col_sums, measured):
            resid = b - m @ x
            ratio = np.divide(resid, rs, out=np.zeros_like(resid), where=rs > 1e-12)
            update = mt @ ratio
            x += cfg.relaxation * np.divide(update, cs, out=np.zeros_like(update), where=cs > 1e-12)
        img = x.reshape(shape)
        if tv_step > 0:
            for _ in range(cfg.tv_inner_steps):
                img -= tv_step * tv_smoothed_grad(img)
        np.maximum(img, 0.0, out=img)
        x = img.ravel()
        if not return_residuals:
            continue
        sq = sum(float(np.sum((b - m @ x) ** 2)) for m, b in zip(mats, measured))
        residuals.append(float(np.sqrt(sq / (n_det * views.size))))
    image = x.reshape(shape)
    if return_residuals:
        return SartTvResult(image, residuals)
    return image

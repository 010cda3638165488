"""Angular cuts of a sinogram and merge-Radon gap filling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tomo import FilterKind, Sinogram, fbp_reconstruct, radon_forward

__all__ = ["AngularMask", "MaskedSinogram", "cut_rear", "cut_middle", "cut", "merge_radon"]


@dataclass
class AngularMask:
    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.ndim != 1:
            raise ValueError("mask must be 1-D")
        if not self.valid.any():
            raise ValueError("mask must keep at least one angle")

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


@dataclass
class MaskedSinogram:
    sino: Sinogram
    mask: AngularMask

    def __post_init__(self):
        if self.mask.valid.size != self.sino.n_angles:
            raise ValueError("mask length does not match the sinogram angles")
        if np.any(self.sino.data[:, ~self.mask.valid] != 0):
            raise ValueError("masked columns must be zero-filled")


def _span(sino: Sinogram) -> float:
    if sino.n_angles < 2:
        return 180.0
    return float(sino.n_angles * np.median(np.diff(sino.angles)))


def _apply(sino: Sinogram, invalid: np.ndarray) -> MaskedSinogram:
    data = sino.data.copy()
    data[:, invalid] = 0
    return MaskedSinogram(Sinogram(data, sino.angles.copy()), AngularMask(~invalid))


def _check_degrees(sino: Sinogram, degrees: float) -> float:
    span = _span(sino)
    if not 0 <= degrees < span:
        raise ValueError(f"cut of {degrees} degrees is outside [0, {span})")
    return span


def cut_rear(sino: Sinogram, degrees: float) -> MaskedSinogram:
    """Drop the last ``ceil(degrees)`` degrees of views (zero-filled, masked)."""
    span = _check_degrees(sino, degrees)
    start = sino.angles[0] + span - math.ceil(degrees)
    invalid = sino.angles >= start if degrees > 0 else np.zeros(sino.n_angles, dtype=bool)
    return _apply(sino, invalid)


def cut_middle(sino: Sinogram, degrees: float) -> MaskedSinogram:
    """Drop the centred interval ``[(180-d)/2, (180+d)/2)`` with d rounded up."""
    span = _check_degrees(sino, degrees)
    d = math.ceil(degrees)
    lo = sino.angles[0] + (span - d) / 2.0
    hi = sino.angles[0] + (span + d) / 2.0
    invalid = (sino.angles >= lo) & (sino.angles < hi)
    return _apply(sino, invalid)


def cut(sino: Sinogram, mode: str, degrees: float) -> MaskedSinogram:
    if mode == "rear":
        return cut_rear(sino, degrees)
    if mode in ("middle", "mid"):
        return cut_middle(sino, degrees)
    raise ValueError(f"unknown cut mode {mode!r}")


def merge_radon(
    masked: MaskedSinogram,
    kind: FilterKind | str = FilterKind.RAM_LAK,
    image_shape: tuple[int, int] | None = None,
) -> Sinogram:
    """Fill the masked views with the re-projection of the limited-view FBP.

    Valid columns are copied from the input unchanged.
    """
    valid = masked.mask.valid
    if valid.all():
        return masked.sino.copy()
    sino = masked.sino
    h, w = image_shape or (sino.n_detectors, sino.n_detectors)
    recon = fbp_reconstruct(sino, kind, w, h)
    full = radon_forward(recon, sino.angles, sino.n_detectors)
    out = sino.data.copy()
    out[:, ~valid] = full.data[:, ~valid].astype(out.dtype)
    return Sinogram(out, sino.angles.copy())

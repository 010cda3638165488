"""Synthetic phantoms, dataset splits and the binary grid / PGM file formats."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SHEPP_LOGAN_ELLIPSES",
    "EllipsoidSpec",
    "SliceVolume",
    "DatasetSplit",
    "GridError",
    "GridFormatError",
    "GridTruncatedError",
    "GridDimensionError",
    "ellipse_value",
    "shepp_logan",
    "render_ellipsoids",
    "random_ellipsoids",
    "volume_phantom",
    "split_cases",
    "save_grid",
    "load_grid",
    "export_pgm",
]

# (intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees);
# modified (high-contrast) intensities so the sum lies in [0, 1].
SHEPP_LOGAN_ELLIPSES = (
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)


def ellipse_value(x, y, ellipses=SHEPP_LOGAN_ELLIPSES):
    """Analytic sum of ellipse intensities covering the point(s) ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    for value, a, b, x0, y0, phi in ellipses:
        phi = np.deg2rad(phi)
        dx = x - x0
        dy = y - y0
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        out += np.where((u / a) ** 2 + (v / b) ** 2 <= 1.0, value, 0.0)
    return out


def shepp_logan(size: int = 256) -> np.ndarray:
    """Ten-ellipse Shepp-Logan phantom on a ``size x size`` grid, values in [0, 1].

    Pixel centres map to ``x = (2 col - (size-1)) / size`` and ``y`` likewise
    with rows counted upwards, so odd sizes have a pixel exactly at (0, 0).
    """
    if size < 32:
        raise ValueError("phantom size must be >= 32")
    coords = (2.0 * np.arange(size) - (size - 1)) / size
    x, y = np.meshgrid(coords, coords[::-1])
    img = ellipse_value(x, y)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class EllipsoidSpec:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    rotation: float = 0.0  # about z, radians
    intensity: float = 1.0

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise ValueError("semi-axes must be positive")


@dataclass
class SliceVolume:
    slices: np.ndarray  # (n_slices, H, W)
    case_id: str = "case"

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 3:
            raise ValueError("a volume is a (n_slices, H, W) stack")
        if self.slices.shape[0] < 5:
            raise ValueError("a volume needs at least 5 slices")

    def __len__(self):
        return self.slices.shape[0]

    @property
    def shape(self):
        return self.slices.shape[1:]


def render_ellipsoids(specs, n_slices: int, size: int) -> np.ndarray:
    """Cross-sections of ``specs`` at z = 0, 1, ..., n_slices-1 (pixel units).

    In-plane coordinates are pixel centres measured from the image centre.
    Intensities add; the result is clipped to [0, 1].
    """
    ax = np.arange(size) - (size - 1) / 2.0
    x, y = np.meshgrid(ax, ax)
    vol = np.zeros((n_slices, size, size))
    for spec in specs:
        cx, cy, cz = spec.center
        a, b, c = spec.semi_axes
        cos_r, sin_r = np.cos(spec.rotation), np.sin(spec.rotation)
        u = (x - cx) * cos_r + (y - cy) * sin_r
        v = -(x - cx) * sin_r + (y - cy) * cos_r
        q = (u / a) ** 2 + (v / b) ** 2
        for z in range(n_slices):
            dz = (z - cz) / c
            if abs(dz) >= 1.0:
                continue
            vol[z] += np.where(q <= 1.0 - dz * dz, spec.intensity, 0.0)
    return np.clip(vol, 0.0, 1.0)


def random_ellipsoids(rng: np.random.Generator, n_slices: int, size: int, n_ellipsoids: int):
    """A body ellipsoid spanning the stack plus ``n_ellipsoids`` random inclusions."""
    half = size / 2.0
    zc = (n_slices - 1) / 2.0
    body = EllipsoidSpec(
        center=(rng.uniform(-0.04, 0.04) * size, rng.uniform(-0.04, 0.04) * size, zc),
        semi_axes=(
            rng.uniform(0.70, 0.85) * half,
            rng.uniform(0.60, 0.80) * half,
            n_slices * rng.uniform(1.5, 3.0),
        ),
        rotation=rng.uniform(-0.3, 0.3),
        intensity=rng.uniform(0.25, 0.45),
    )
    specs = [body]
    for _ in range(n_ellipsoids):
        r = rng.uniform(0.0, 0.45) * half
        ang = rng.uniform(0, 2 * np.pi)
        specs.append(
            EllipsoidSpec(
                center=(r * np.cos(ang), r * np.sin(ang), rng.uniform(-0.2, 1.2) * n_slices),
                semi_axes=(
                    rng.uniform(0.06, 0.28) * half,
                    rng.uniform(0.06, 0.28) * half,
                    rng.uniform(0.3, 1.0) * n_slices,
                ),
                rotation=rng.uniform(0, np.pi),
                intensity=rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.5),
            )
        )
    return specs


def volume_phantom(n_slices: int, size: int, n_ellipsoids: int = 6, seed=0, case_id=None) -> SliceVolume:
    """Random ellipsoid volume sliced along z at unit spacing; seed-deterministic."""
    if n_slices < 5:
        raise ValueError("n_slices must be >= 5")
    rng = np.random.default_rng(seed)
    specs = random_ellipsoids(rng, n_slices, size, n_ellipsoids)
    slices = render_ellipsoids(specs, n_slices, size)
    mad = np.abs(np.diff(slices, axis=0)).mean(axis=(1, 2))
    span = slices.max() - slices.min()
    if span > 0 and np.any(mad >= span):
        raise RuntimeError("generated volume violates slice continuity")
    return SliceVolume(slices, case_id or f"case{seed}")


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("dataset splits must be disjoint")


def split_cases(case_ids, n_test: int, n_val: int) -> DatasetSplit:
    """Leading cases go to test, the next ones to val, the rest to train."""
    ids = list(case_ids)
    return DatasetSplit(
        train=ids[n_test + n_val:], val=ids[n_test:n_test + n_val], test=ids[:n_test]
    )


# --------------------------------------------------------------------------
# grid file format: b"LVCT1\0", u32 rank, rank x u32 dims, float32 LE row-major

GRID_MAGIC = b"LVCT1\x00"
MAX_GRID_RANK = 8
MAX_GRID_ELEMENTS = 1 << 31


class GridError(Exception):
    code = "grid_error"


class GridFormatError(GridError):
    code = "bad_magic"


class GridTruncatedError(GridError):
    code = "truncated"


class GridDimensionError(GridError):
    code = "dim_overflow"


def save_grid(path, grid) -> None:
    grid = np.asarray(grid)
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid contains non-finite values")
    header = GRID_MAGIC + struct.pack("<I", grid.ndim) + struct.pack(f"<{grid.ndim}I", *grid.shape)
    payload = np.ascontiguousarray(grid, dtype="<f4").tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(GRID_MAGIC)] != GRID_MAGIC:
        if len(raw) < len(GRID_MAGIC) and GRID_MAGIC.startswith(raw):
            raise GridTruncatedError(f"{path}: file ends inside the magic")
        raise GridFormatError(f"{path}: not a grid file (bad magic)")
    pos = len(GRID_MAGIC)
    if len(raw) < pos + 4:
        raise GridTruncatedError(f"{path}: missing rank")
    (rank,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if rank > MAX_GRID_RANK:
        raise GridDimensionError(f"{path}: rank {rank} exceeds {MAX_GRID_RANK}")
    if len(raw) < pos + 4 * rank:
        raise GridTruncatedError(f"{path}: missing dimensions")
    dims = struct.unpack_from(f"<{rank}I", raw, pos)
    pos += 4 * rank
    count = 1
    for d in dims:
        count *= d
    if count > MAX_GRID_ELEMENTS:
        raise GridDimensionError(f"{path}: {count} elements exceed the format limit")
    need = pos + 4 * count
    if len(raw) < need:
        raise GridTruncatedError(f"{path}: expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise GridFormatError(f"{path}: {len(raw) - need} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
    return data.astype(np.float32).reshape(dims)


def export_pgm(img, path) -> None:
    """Min-max scale ``img`` to 8 bits and write a binary (P5) PGM.

    A constant image maps to mid-gray 128.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        pix = np.full(img.shape, 128, dtype=np.uint8)
    else:
        pix = np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())

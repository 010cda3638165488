"""Volume-level data preparation, stage training and evaluation.

Everything here works on whole volumes: ``(S, H, W)`` image stacks and
``(S, n_det, n_angles)`` sinogram stacks. Networks see data normalized per
volume with the input's min/max (targets use the same mapping) and results
are mapped back to physical units before any metric is taken.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .limited_view import cut as cut_sinogram
from .limited_view import merge_radon
from .losses import MetricReport, psnr, ssim
from .models.stages import (
    CropMethod,
    PatchRefiner,
    SingleSlice,
    SinogramCompletion,
    SpatialAAE,
    build_aae,
    clamped_windows,
    crop_corners,
    random_crops,
)
from .models.training import ArrayDataset, TrainConfig, train_stage
from .models.unet import Discriminator, NetSpec, UNet
from .phantom import SliceVolume, volume_phantom
from .tomo import FilterKind, SartTvConfig, Sinogram, default_angles, fbp_reconstruct, radon_forward, sart_tv_reconstruct

__all__ = [
    "Geometry",
    "Normalizer",
    "CaseData",
    "ALGORITHMS",
    "make_volumes",
    "prepare_case",
    "fbp_stack",
    "sino_metrics",
    "image_metrics",
    "StageModels",
    "train_all",
    "train_stage1",
    "train_image_aae",
    "train_spatial",
    "train_refine",
    "complete_sinograms",
    "restore_single",
    "restore_spatial",
    "restore_refine",
    "run_ours",
    "compare_algorithms",
]

log = logging.getLogger(__name__)

ALGORITHMS = (
    "FBP",
    "FBP+MR",
    "SART-TV",
    "SART-TV+MR",
    "II",
    "II+MR",
    "SI",
    "SI+MR",
    "Ours",
)


@dataclass(frozen=True)
class Geometry:
    size: int = 128
    n_angles: int = 180
    n_detectors: int = 128

    @property
    def angles(self) -> np.ndarray:
        return default_angles(self.n_angles)

    def as_dict(self):
        return {"size": self.size, "n_angles": self.n_angles, "n_detectors": self.n_detectors}


@dataclass(frozen=True)
class Normalizer:
    lo: float
    hi: float

    @classmethod
    def from_data(cls, x) -> "Normalizer":
        lo, hi = float(np.min(x)), float(np.max(x))
        if hi - lo <= 0:
            hi = lo + 1.0
        return cls(lo, hi)

    def forward(self, x):
        return ((x - self.lo) / (self.hi - self.lo)).astype(np.float32)

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64) * (self.hi - self.lo) + self.lo

    def apply_delta(self, x, x_norm, y_norm):
        """Map a network output back as ``x`` plus the scaled change it made.

        Equal to ``inverse(y_norm)`` up to rounding, and exactly ``x`` when
        the network left its input untouched.
        """
        delta = np.asarray(y_norm, dtype=np.float64) - np.asarray(x_norm, dtype=np.float64)
        return x + delta * (self.hi - self.lo)


@dataclass
class CaseData:
    """One volume under one angular cut."""

    case_id: str
    gt: np.ndarray  # (S, H, W)
    sino_gt: np.ndarray  # (S, D, A)
    sino_cut: np.ndarray
    sino_merged: np.ndarray
    valid: np.ndarray  # (A,)
    geometry: Geometry
    fbp_cut: np.ndarray = None
    fbp_merged: np.ndarray = None

    @property
    def n_slices(self):
        return self.gt.shape[0]


def make_volumes(n: int, n_slices: int, size: int, n_ellipsoids: int = 6, seed: int = 0, prefix="case"):
    return [
        volume_phantom(n_slices, size, n_ellipsoids, seed=seed * 100003 + i, case_id=f"{prefix}{seed}_{i}")
        for i in range(n)
    ]


def fbp_stack(sinos, geometry: Geometry, kind=FilterKind.RAM_LAK):
    ang = geometry.angles
    return np.stack([fbp_reconstruct(Sinogram(s, ang), kind, geometry.size, geometry.size) for s in sinos])


def prepare_case(volume: SliceVolume, geometry: Geometry, mode: str, degrees: float,
                 kind=FilterKind.RAM_LAK) -> CaseData:
    ang = geometry.angles
    gts, cuts, merged = [], [], []
    valid = None
    for img in volume.slices:
        full = radon_forward(img, ang, geometry.n_detectors)
        masked = cut_sinogram(full, mode, degrees)
        valid = masked.mask.valid
        gts.append(full.data.astype(np.float64))
        cuts.append(masked.sino.data.astype(np.float64))
        merged.append(merge_radon(masked, kind, (geometry.size, geometry.size)).data.astype(np.float64))
    case = CaseData(
        case_id=volume.case_id,
        gt=np.asarray(volume.slices, dtype=np.float64),
        sino_gt=np.stack(gts),
        sino_cut=np.stack(cuts),
        sino_merged=np.stack(merged),
        valid=valid,
        geometry=geometry,
    )
    case.fbp_cut = fbp_stack(case.sino_cut, geometry, kind)
    case.fbp_merged = fbp_stack(case.sino_merged, geometry, kind)
    return case


# ---------------------------------------------------------------- metrics


def sino_metrics(pred, gt) -> MetricReport:
    """Mean per-slice sinogram PSNR/SSIM after scaling both by the ground-truth volume maximum."""
    scale = float(np.max(gt)) or 1.0
    p = [psnr(a / scale, b / scale) for a, b in zip(pred, gt)]
    s = [ssim(a / scale, b / scale) for a, b in zip(pred, gt)] if min(gt.shape[1:]) >= 11 else [np.nan]
    return MetricReport(float(np.mean(p)), float(np.mean(s)))


def image_metrics(pred, gt) -> MetricReport:
    p = [psnr(a, b) for a, b in zip(pred, gt)]
    s = [ssim(a, b) for a, b in zip(pred, gt)]
    return MetricReport(float(np.mean(p)), float(np.mean(s)))


def _mean_report(reports):
    return MetricReport(float(np.mean([r.psnr for r in reports])), float(np.mean([r.ssim for r in reports])))


# ---------------------------------------------------------------- inference


def _batched(fn, x, batch=16):
    return np.concatenate([fn(x[i:i + batch]) for i in range(0, len(x), batch)])


def complete_sinograms(block, sinos, valid, batch=8):
    """Stage one on a volume: normalize, complete masked views, restore units."""
    norm = Normalizer.from_data(sinos)
    model = SinogramCompletion(block, valid)
    xn = norm.forward(sinos)
    out = _batched(model.forward, xn[:, None], batch)
    res = norm.apply_delta(sinos, xn, out[:, 0])
    res[:, :, valid] = sinos[:, :, valid]
    return res


def restore_single(block, images, batch=16):
    norm = Normalizer.from_data(images)
    xn = norm.forward(images)
    out = _batched(SingleSlice(block).forward, xn[:, None], batch)
    return norm.apply_delta(images, xn, out[:, 0])


def restore_spatial(spatial: SpatialAAE, images, batch=8):
    norm = Normalizer.from_data(images)
    xn = norm.forward(images)
    out = _batched(spatial.forward, clamped_windows(xn), batch)
    return norm.apply_delta(images, xn, out[:, 0])


def restore_refine(block, images, method=CropMethod.CORNER, batch=8):
    # random crops have no inverse, so inference tiles plain corners for them
    method = CropMethod.parse(method)
    model = PatchRefiner(block, CropMethod.CORNER if method is CropMethod.RANDOM else method)
    norm = Normalizer.from_data(images)
    xn = norm.forward(images)
    out = _batched(model.forward, xn[:, None], batch)
    return norm.apply_delta(images, xn, out[:, 0])


# ---------------------------------------------------------------- training


def _stack_normalized(pairs):
    """``pairs`` of (input volume, target volume) -> normalized concatenated arrays."""
    xs, ys = [], []
    for x, y in pairs:
        norm = Normalizer.from_data(x)
        xs.append(norm.forward(x))
        ys.append(norm.forward(y))
    return np.concatenate(xs), np.concatenate(ys)


def _new_block(in_channels, cfg: TrainConfig, salt=0):
    ae, dis = build_aae(in_channels, cfg.width, seed=cfg.seed * 7 + salt)
    return ae, dis


def train_stage1(cases, cfg: TrainConfig, source="merged", val_cases=()):
    """Sinogram completion network trained on ``source`` ('merged' or 'cut') sinograms."""
    valid = cases[0].valid
    x, y = _stack_normalized([(getattr(c, f"sino_{source}"), c.sino_gt) for c in cases])
    block, dis = _new_block(1, cfg, salt=1)
    model = SinogramCompletion(block, valid)

    def validate():
        rep = [sino_metrics(complete_sinograms(block, getattr(c, f"sino_{source}"), c.valid), c.sino_gt)
               for c in val_cases]
        mean = _mean_report(rep)
        return mean.psnr, mean.ssim

    logrows = train_stage(model, ArrayDataset(x[:, None], y[:, None]), cfg, dis,
                          validate if val_cases else None)
    return block, logrows


def train_image_aae(inputs, targets, cfg: TrainConfig, val=()):
    """Single-slice image-domain AAE; ``inputs``/``targets`` are lists of volumes."""
    x, y = _stack_normalized(zip(inputs, targets))
    block, dis = _new_block(1, cfg, salt=2)

    def validate():
        rep = [image_metrics(restore_single(block, vi), vt) for vi, vt in val]
        return _mean_report(rep).psnr, _mean_report(rep).ssim

    logrows = train_stage(SingleSlice(block), ArrayDataset(x[:, None], y[:, None]), cfg, dis,
                          validate if val else None)
    return block, logrows


def train_spatial(inputs, targets, cfg: TrainConfig, val=()):
    xs, ys = [], []
    for vi, vt in zip(inputs, targets):
        norm = Normalizer.from_data(vi)
        xs.append(clamped_windows(norm.forward(vi)))
        ys.append(norm.forward(vt)[:, None])
    x, y = np.concatenate(xs), np.concatenate(ys)
    g1, dis = _new_block(3, cfg, salt=3)
    g2 = UNet(NetSpec(3, cfg.width), seed=cfg.seed * 7 + 4, prefix="ae2.")
    spatial = SpatialAAE(g1, g2)

    def validate():
        rep = [image_metrics(restore_spatial(spatial, vi), vt) for vi, vt in val]
        return _mean_report(rep).psnr, _mean_report(rep).ssim

    logrows = train_stage(spatial, ArrayDataset(x, y), cfg, dis, validate if val else None)
    return spatial, logrows


def train_refine(inputs, targets, cfg: TrainConfig, method=CropMethod.CORNER, val=()):
    method = CropMethod.parse(method)
    x, y = _stack_normalized(zip(inputs, targets))
    x, y = x[:, None], y[:, None]
    block, dis = _new_block(1, cfg, salt=5)
    if method is CropMethod.RANDOM:
        model = SingleSlice(block)
        data = ArrayDataset(x, y, transform=random_crops)
    else:
        model = PatchRefiner(block, method)
        data = ArrayDataset(x, y)

    def validate():
        rep = [image_metrics(restore_refine(block, vi, method), vt) for vi, vt in val]
        return _mean_report(rep).psnr, _mean_report(rep).ssim

    logrows = train_stage(model, data, cfg, dis, validate if val else None)
    return block, logrows


@dataclass
class StageModels:
    """Trained networks for one cut. Any missing entry falls back as noted in :func:`compare_algorithms`."""

    stage1: object = None  # completion on merged sinograms (also SI+MR)
    stage1_cut: object = None  # completion on zero-filled sinograms (SI)
    ii: object = None  # image AAE on FBP of the cut sinogram
    ii_mr: object = None  # image AAE on FBP of the merged sinogram
    si_mr: object = None  # completion used for SI+MR; defaults to ``stage1``
    spatial: SpatialAAE = None
    refine: object = None
    refine_method: CropMethod = CropMethod.CORNER
    logs: dict = field(default_factory=dict)


def train_all(train_cases, cfg: TrainConfig | dict, val_cases=(), with_baselines=True) -> StageModels:
    """Train every network needed for the nine-way comparison on one cut.

    ``cfg`` may be a dict mapping stage names ('stage1', 'stage2', 'stage3',
    'baseline') to configs.
    """
    cfgs = cfg if isinstance(cfg, dict) else {}
    pick = lambda k: cfgs.get(k, cfg if isinstance(cfg, TrainConfig) else TrainConfig())  # noqa: E731
    m = StageModels()
    t0 = time.perf_counter()
    m.stage1, m.logs["stage1"] = train_stage1(train_cases, pick("stage1"), "merged", val_cases)
    s1_train = [fbp_stack(complete_sinograms(m.stage1, c.sino_merged, c.valid), c.geometry) for c in train_cases]
    s1_val = [fbp_stack(complete_sinograms(m.stage1, c.sino_merged, c.valid), c.geometry) for c in val_cases]
    gts = [c.gt for c in train_cases]
    val_gts = [c.gt for c in val_cases]
    m.spatial, m.logs["stage2"] = train_spatial(s1_train, gts, pick("stage2"), list(zip(s1_val, val_gts)))
    s2_train = [restore_spatial(m.spatial, v) for v in s1_train]
    s2_val = [restore_spatial(m.spatial, v) for v in s1_val]
    m.refine, m.logs["stage3"] = train_refine(s2_train, gts, pick("stage3"), m.refine_method,
                                              list(zip(s2_val, val_gts)))
    if with_baselines:
        base = pick("baseline")
        m.stage1_cut, m.logs["si"] = train_stage1(train_cases, pick("stage1"), "cut", val_cases)
        m.ii, m.logs["ii"] = train_image_aae([c.fbp_cut for c in train_cases], gts, base,
                                             [(c.fbp_cut, c.gt) for c in val_cases])
        m.ii_mr, m.logs["ii_mr"] = train_image_aae([c.fbp_merged for c in train_cases], gts, base,
                                                   [(c.fbp_merged, c.gt) for c in val_cases])
    log.info("trained all stages in %.1fs", time.perf_counter() - t0)
    return m


# ---------------------------------------------------------------- evaluation


def run_ours(models: StageModels, case: CaseData):
    """Full pipeline on one case; returns a dict of intermediate stacks."""
    s1 = complete_sinograms(models.stage1, case.sino_merged, case.valid)
    img1 = fbp_stack(s1, case.geometry)
    img2 = restore_spatial(models.spatial, img1)
    img3 = restore_refine(models.refine, img2, models.refine_method)
    return {"stage1_sino": s1, "stage1": img1, "stage2": img2, "stage3": img3}


def _sart_stack(sinos, valid, geometry, cfg):
    from .limited_view import AngularMask, MaskedSinogram

    out = []
    for s in sinos:
        sg = Sinogram(s, geometry.angles)
        src = sg if valid is None else MaskedSinogram(sg, AngularMask(valid))
        out.append(sart_tv_reconstruct(src, cfg, geometry.size, geometry.size))
    return np.stack(out)


def compare_algorithms(models: StageModels, cases, sart_cfg: SartTvConfig | None = None,
                       algorithms=ALGORITHMS, timings: dict | None = None):
    """Mean image PSNR/SSIM of each algorithm over ``cases``.

    The learned rows need the matching networks in ``models``: SI uses
    ``stage1_cut``, SI+MR ``si_mr`` (falling back to ``stage1``), II ``ii``
    and II+MR ``ii_mr`` (falling back to ``ii``).
    """
    sart_cfg = sart_cfg or SartTvConfig()
    per_alg = {a: [] for a in algorithms}
    timings = {} if timings is None else timings
    timings.setdefault("FBP", []), timings.setdefault("SART-TV", [])
    for case in cases:
        g = case.geometry
        outputs = {}
        if "FBP" in per_alg:
            t = time.perf_counter()
            outputs["FBP"] = fbp_stack(case.sino_cut, g)
            timings["FBP"].append((time.perf_counter() - t) / case.n_slices)
        if "FBP+MR" in per_alg:
            outputs["FBP+MR"] = case.fbp_merged
        if "SART-TV" in per_alg:
            t = time.perf_counter()
            outputs["SART-TV"] = _sart_stack(case.sino_cut, case.valid, g, sart_cfg)
            timings["SART-TV"].append((time.perf_counter() - t) / case.n_slices)
        if "SART-TV+MR" in per_alg:
            outputs["SART-TV+MR"] = _sart_stack(case.sino_merged, None, g, sart_cfg)
        if "II" in per_alg:
            outputs["II"] = restore_single(models.ii, case.fbp_cut)
        if "II+MR" in per_alg:
            outputs["II+MR"] = restore_single(models.ii_mr or models.ii, case.fbp_merged)
        if "SI" in per_alg:
            outputs["SI"] = fbp_stack(complete_sinograms(models.stage1_cut, case.sino_cut, case.valid), g)
        if "SI+MR" in per_alg:
            si_mr = models.si_mr or models.stage1
            outputs["SI+MR"] = fbp_stack(complete_sinograms(si_mr, case.sino_merged, case.valid), g)
        if "Ours" in per_alg:
            outputs["Ours"] = run_ours(models, case)["stage3"]
        for name, vol in outputs.items():
            per_alg[name].append(image_metrics(vol, case.gt))
    return {a: _mean_report(r) for a, r in per_alg.items() if r}

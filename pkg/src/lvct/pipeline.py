"""Config-driven training, the three-stage pipeline and the nine-way comparison.

Configuration is an INI file (see ``configs/desk.ini`` in the repository):

* ``[geometry]`` size, n_angles, n_detectors
* ``[cut]`` mode (rear | middle), degrees
* ``[data]`` n_train, n_val, n_test, n_slices, n_ellipsoids, seed, or
  ``volumes`` as a comma-separated list of rank-3 grid files
* ``[train]`` shared TrainConfig fields; ``[train.stage1]``,
  ``[train.stage2]``, ``[train.stage3]``, ``[train.baseline]`` override them
* ``[stages]`` stage2_mode (spatial | single), stage3_crop (corner |
  corner_flip | random)
* ``[checkpoints]`` stage1, stage2, stage3, ii, ii_mr, si, si_mr
* ``[sart_tv]`` SartTvConfig fields
* ``[run]`` seed, out_dir

The run seed may be overridden by ``--seed`` or the ``LVCT_SEED`` variable.
Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import configparser
import csv
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from .losses import MetricReport
from .models.stages import CropMethod, SpatialAAE
from .models.training import TrainConfig, write_log
from .models.unet import NetSpec, UNet
from .nn.checkpoint import load_params, save_params
from .phantom import DatasetSplit, SliceVolume, export_pgm, load_grid, save_grid, split_cases
from .tomo import SartTvConfig

__all__ = [
    "ConfigError",
    "CheckpointMismatchError",
    "DataConfig",
    "PipelineConfig",
    "load_config",
    "ComparisonRow",
    "save_model",
    "load_model",
    "prepare_data",
    "train_command",
    "run_pipeline",
    "run_comparison",
    "SEED_ENV",
]

log = logging.getLogger(__name__)

SEED_ENV = "LVCT_SEED"
CHECKPOINT_NAMES = ("stage1", "stage2", "stage3", "ii", "ii_mr", "si", "si_mr")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointMismatchError(Exception):
    """A checkpoint was trained for a different geometry, cut or role."""


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 24
    n_val: int = 2
    n_test: int = 3
    n_slices: int = 8
    n_ellipsoids: int = 6
    seed: int = 0
    volumes: tuple = ()


@dataclass
class PipelineConfig:
    geometry: ex.Geometry = field(default_factory=ex.Geometry)
    cut_mode: str = "rear"
    cut_degrees: float = 60.0
    data: DataConfig = field(default_factory=DataConfig)
    train: dict = field(default_factory=dict)  # stage name -> TrainConfig
    stage2_mode: str = "spatial"
    stage3_crop: CropMethod = CropMethod.CORNER
    checkpoints: dict = field(default_factory=dict)
    sart: SartTvConfig = field(default_factory=SartTvConfig)
    out_dir: Path = Path("out")
    seed: int = 0

    def __post_init__(self):
        if self.cut_mode not in ("rear", "middle"):
            raise ConfigError(f"cut mode must be rear or middle, got {self.cut_mode!r}")
        if not 0 < self.cut_degrees < 180:
            raise ConfigError(f"cut degrees must lie in (0, 180), got {self.cut_degrees}")
        if self.stage2_mode not in ("spatial", "single"):
            raise ConfigError(f"stage2_mode must be spatial or single, got {self.stage2_mode!r}")
        g = self.geometry
        if g.size < 16 or g.n_angles < 2 or g.n_detectors < 1:
            raise ConfigError(f"bad geometry {g}")

    def train_config(self, stage: str) -> TrainConfig:
        base = self.train.get(stage) or self.train.get("default") or TrainConfig()
        return base.with_(seed=self.seed)

    def checkpoint(self, name: str, required=True) -> Path | None:
        p = self.checkpoints.get(name)
        if p is None:
            if required:
                raise ConfigError(f"no [checkpoints] {name} entry in the config")
            return None
        return Path(p)

    @property
    def cut_key(self):
        return {"mode": self.cut_mode, "degrees": float(self.cut_degrees)}


def _coerce(value: str, typ):
    if typ is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    if typ in ("int | None",):
        return None if value.strip().lower() in ("", "none") else int(value)
    return value


def _dataclass_from(section, cls, base=None, skip=()):
    base = base or cls()
    kw = {}
    types = {f.name: f.type for f in fields(cls)}
    for key, value in section.items():
        if key in skip:
            continue
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        t = types[key]
        t = {"float": float, "int": int, "bool": bool}.get(t, t)
        try:
            kw[key] = _coerce(value, t)
        except ValueError as e:
            raise ConfigError(f"[{section.name}] {key}: {e}") from None
    try:
        return replace(base, **kw)
    except ValueError as e:
        raise ConfigError(f"[{section.name}]: {e}") from None


_SECTIONS = {"geometry", "cut", "data", "train", "train.stage1", "train.stage2", "train.stage3",
             "train.baseline", "stages", "checkpoints", "sart_tv", "run"}


def load_config(path, seed: int | None = None) -> PipelineConfig:
    """Parse an INI config; ``seed`` (or ``$LVCT_SEED``) overrides ``[run] seed``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    unknown = set(cp.sections()) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    root = path.parent

    def sect(name):
        return cp[name] if cp.has_section(name) else {}

    def resolve(p):
        p = Path(p.strip())
        return p if p.is_absolute() else root / p

    try:
        g = sect("geometry")
        size = int(g.get("size", 128))
        geometry = ex.Geometry(size, int(g.get("n_angles", 180)), int(g.get("n_detectors", size)))
        c = sect("cut")
        d = cp["data"] if cp.has_section("data") else None
        data = _dataclass_from(d, DataConfig, skip=("volumes",)) if d is not None else DataConfig()
        if d is not None and d.get("volumes", "").strip():
            data = replace(data, volumes=tuple(resolve(v) for v in d["volumes"].split(",") if v.strip()))
        train = {}
        default = _dataclass_from(cp["train"], TrainConfig) if cp.has_section("train") else TrainConfig()
        train["default"] = default
        for stage in ("stage1", "stage2", "stage3", "baseline"):
            name = f"train.{stage}"
            if cp.has_section(name):
                train[stage] = _dataclass_from(cp[name], TrainConfig, default)
        st = sect("stages")
        ck = {k: resolve(v) for k, v in sect("checkpoints").items() if v.strip()}
        bad = set(ck) - set(CHECKPOINT_NAMES)
        if bad:
            raise ConfigError(f"unknown checkpoint names: {sorted(bad)}")
        sart = _dataclass_from(cp["sart_tv"], SartTvConfig) if cp.has_section("sart_tv") else SartTvConfig()
        run = sect("run")
        env_seed = os.environ.get(SEED_ENV)
        run_seed = int(run.get("seed", 0))
        if env_seed is not None and env_seed.strip():
            run_seed = int(env_seed)
        if seed is not None:
            run_seed = int(seed)
        return PipelineConfig(
            geometry=geometry,
            cut_mode=c.get("mode", "rear").strip().lower(),
            cut_degrees=float(c.get("degrees", 60)),
            data=data,
            train=train,
            stage2_mode=st.get("stage2_mode", "spatial").strip().lower(),
            stage3_crop=CropMethod.parse(st.get("stage3_crop", "corner").strip()),
            checkpoints=ck,
            sart=sart,
            out_dir=resolve(run.get("out_dir", "out")),
            seed=run_seed,
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


# ---------------------------------------------------------------- checkpoints


def _meta_path(path) -> Path:
    return Path(str(path) + ".json")


def _build(meta):
    kind = meta["kind"]
    w = int(meta["width"])
    if kind == "spatial":
        return SpatialAAE(UNet(NetSpec(3, w), prefix="ae."), UNet(NetSpec(3, w), prefix="ae2."))
    if kind in ("completion", "single", "refine"):
        return UNet(NetSpec(1, w), prefix="ae.")
    raise CheckpointMismatchError(f"unknown model kind {kind!r}")


def save_model(path, model, meta: dict) -> None:
    """Weights in the LVCTW1 format plus a ``.json`` sidecar describing how to rebuild them."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(path, model.params())
    tmp = _meta_path(path).with_suffix(".json.tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, _meta_path(path))


def load_model(path, cfg: PipelineConfig | None = None, expect_kind=None):
    """Rebuild and load a model; checks geometry (and cut for completion models) against ``cfg``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    mp = _meta_path(path)
    if not mp.is_file():
        raise FileNotFoundError(f"checkpoint metadata not found: {mp}")
    meta = json.loads(mp.read_text())
    kinds = (expect_kind,) if isinstance(expect_kind, str) else expect_kind
    if kinds and meta.get("kind") not in kinds:
        raise CheckpointMismatchError(f"{path}: expected a {'/'.join(kinds)} model, found {meta.get('kind')!r}")
    if cfg is not None:
        if meta.get("geometry") != cfg.geometry.as_dict():
            raise CheckpointMismatchError(
                f"{path}: geometry {meta.get('geometry')} does not match config {cfg.geometry.as_dict()}")
        if meta.get("kind") == "completion" and meta.get("cut") != cfg.cut_key:
            raise CheckpointMismatchError(f"{path}: trained for cut {meta.get('cut')}, config has {cfg.cut_key}")
    model = _build(meta)
    load_params(path, model.params())
    return meta, model


# ---------------------------------------------------------------- data


@dataclass
class PreparedData:
    split: DatasetSplit
    cases: dict  # case_id -> CaseData

    def subset(self, name):
        return [self.cases[i] for i in getattr(self.split, name)]


def _load_volumes(cfg: PipelineConfig):
    d = cfg.data
    if d.volumes:
        vols = []
        for p in d.volumes:
            arr = load_grid(p)
            if arr.ndim != 3:
                raise ConfigError(f"{p}: volume grids must be rank 3 (slices, H, W), got rank {arr.ndim}")
            if arr.shape[1:] != (cfg.geometry.size, cfg.geometry.size):
                raise ConfigError(f"{p}: slice size {arr.shape[1:]} does not match geometry size {cfg.geometry.size}")
            vols.append(SliceVolume(arr.astype(np.float64), Path(p).stem))
        return vols
    total = d.n_train + d.n_val + d.n_test
    return ex.make_volumes(total, d.n_slices, cfg.geometry.size, d.n_ellipsoids, seed=d.seed)


def prepare_data(cfg: PipelineConfig) -> PreparedData:
    vols = _load_volumes(cfg)
    ids = [v.case_id for v in vols]
    if len(set(ids)) != len(ids):
        raise ConfigError("volume case ids must be unique")
    split = split_cases(ids, cfg.data.n_test, cfg.data.n_val)
    cases = {v.case_id: ex.prepare_case(v, cfg.geometry, cfg.cut_mode, cfg.cut_degrees) for v in vols}
    return PreparedData(split, cases)


# ---------------------------------------------------------------- stage inputs


def _stage1_images(model, case):
    return ex.fbp_stack(ex.complete_sinograms(model, case.sino_merged, case.valid), case.geometry)


def _stage2_apply(meta, model, images):
    if meta["kind"] == "spatial":
        return ex.restore_spatial(model, images)
    return ex.restore_single(model, images)


class _Loaded:
    """Lazily loads checkpoints named in the config, each at most once."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._cache = {}

    def get(self, name, kinds, required=True):
        if name not in self._cache:
            path = self.cfg.checkpoint(name, required)
            self._cache[name] = None if path is None else load_model(path, self.cfg, kinds)
        return self._cache[name]


def _base_meta(cfg: PipelineConfig, kind, tc: TrainConfig, **extra):
    meta = {"kind": kind, "width": tc.width, "geometry": cfg.geometry.as_dict(), "cut": cfg.cut_key,
            "seed": tc.seed, "lr": tc.lr, "max_iters": tc.max_iters, "epochs": tc.epochs,
            "adversarial": tc.adversarial}
    meta.update(extra)
    return meta


def train_command(cfg: PipelineConfig, stage: str, out=None, source="merged", mode=None, input_kind="stage1",
                  crop=None):
    """Train one network from the config and write its checkpoint, sidecar and loss log.

    ``stage`` is 1, 2 or 3. Stage 1 ``source`` picks merged (the pipeline) or
    cut (the sinogram-inpainting baseline) sinograms. Stage 2 ``input_kind``
    picks stage-one reconstructions, or FBP of the cut or merged sinograms
    for the image-inpainting baselines; ``mode`` is spatial or single.
    Returns the checkpoint path.
    """
    data = prepare_data(cfg)
    train, val = data.subset("train"), data.subset("val")
    if not train:
        raise ConfigError("no training volumes")
    loaded = _Loaded(cfg)
    stage = str(stage)
    if stage == "1":
        tc = cfg.train_config("stage1")
        model, tlog = ex.train_stage1(train, tc, source, val)
        meta = _base_meta(cfg, "completion", tc, source=source, valid=[int(v) for v in train[0].valid])
        default = "stage1" if source == "merged" else "si"
    elif stage == "2":
        mode = mode or cfg.stage2_mode
        if input_kind == "stage1":
            _, s1 = loaded.get("stage1", "completion")
            xin = {c.case_id: _stage1_images(s1, c) for c in train + val}
            tc = cfg.train_config("stage2")
        elif input_kind in ("fbp-cut", "fbp-merged"):
            attr = "fbp_cut" if input_kind == "fbp-cut" else "fbp_merged"
            xin = {c.case_id: getattr(c, attr) for c in train + val}
            tc = cfg.train_config("baseline")
        else:
            raise ConfigError(f"unknown stage-2 input {input_kind!r}")
        inputs = [xin[c.case_id] for c in train]
        targets = [c.gt for c in train]
        vpairs = [(xin[c.case_id], c.gt) for c in val]
        if mode == "spatial":
            model, tlog = ex.train_spatial(inputs, targets, tc, vpairs)
        elif mode == "single":
            model, tlog = ex.train_image_aae(inputs, targets, tc, vpairs)
        else:
            raise ConfigError(f"unknown stage-2 mode {mode!r}")
        meta = _base_meta(cfg, "spatial" if mode == "spatial" else "single", tc, input=input_kind)
        default = {"stage1": "stage2", "fbp-cut": "ii", "fbp-merged": "ii_mr"}[input_kind]
    elif stage == "3":
        crop = CropMethod.parse(crop or cfg.stage3_crop)
        _, s1 = loaded.get("stage1", "completion")
        m2, s2 = loaded.get("stage2", ("spatial", "single"))
        xin = {c.case_id: _stage2_apply(m2, s2, _stage1_images(s1, c)) for c in train + val}
        tc = cfg.train_config("stage3")
        model, tlog = ex.train_refine([xin[c.case_id] for c in train], [c.gt for c in train], tc, crop,
                                      [(xin[c.case_id], c.gt) for c in val])
        meta = _base_meta(cfg, "refine", tc, crop=crop.value)
        default = "stage3"
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    out = Path(out) if out is not None else cfg.checkpoint(default, required=False)
    if out is None:
        out = cfg.out_dir / f"{default}.lvw"
    save_model(out, model, meta)
    write_log(str(out) + ".log.csv", tlog.rows)
    from .plotting import plot_training_log

    plot_training_log(tlog, str(out) + ".log.png")
    return out


# ---------------------------------------------------------------- pipeline


def _write_metrics_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def run_pipeline(cfg: PipelineConfig, write=True):
    """Restore every test volume with the three configured stages.

    Returns ``(volumes, report)``: restored ``(S, H, W)`` stacks by case id
    and the mean image PSNR/SSIM against ground truth. With ``write``, per
    slice grids and PGM previews, ``metrics.csv`` and preview panels go to
    ``cfg.out_dir``.
    """
    loaded = _Loaded(cfg)
    _, s1 = loaded.get("stage1", "completion")
    m2, s2 = loaded.get("stage2", ("spatial", "single"))
    m3, s3 = loaded.get("stage3", "refine")
    crop = CropMethod.parse(m3.get("crop", "corner"))
    data = prepare_data(cfg)
    results, rows, reports = {}, [], []
    for case in data.subset("test"):
        img1 = _stage1_images(s1, case)
        img2 = _stage2_apply(m2, s2, img1)
        img3 = ex.restore_refine(s3, img2, crop)
        results[case.case_id] = img3
        rep = ex.image_metrics(img3, case.gt)
        reports.append(rep)
        for k in range(case.n_slices):
            one = ex.image_metrics(img3[k:k + 1], case.gt[k:k + 1])
            rows.append([case.case_id, k, f"{one.psnr:.6f}", f"{one.ssim:.6f}"])
        if write:
            d = cfg.out_dir / case.case_id
            d.mkdir(parents=True, exist_ok=True)
            for k in range(case.n_slices):
                save_grid(d / f"slice_{k:03d}.grid", img3[k])
                export_pgm(img3[k], d / f"slice_{k:03d}.pgm")
            from .plotting import plot_preview

            mid = case.n_slices // 2
            plot_preview({"ground truth": case.gt[mid], "FBP (cut)": case.fbp_cut[mid],
                          "FBP (merged)": case.fbp_merged[mid], "restored": img3[mid]},
                         d / "preview.png", title=f"{case.case_id} slice {mid}")
    mean = MetricReport(float(np.mean([r.psnr for r in reports])), float(np.mean([r.ssim for r in reports])))
    if write:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        rows.append(["mean", "", f"{mean.psnr:.6f}", f"{mean.ssim:.6f}"])
        _write_metrics_csv(cfg.out_dir / "metrics.csv", rows, ["case", "slice", "psnr", "ssim"])
    return results, mean


# ---------------------------------------------------------------- comparison


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    psnr: float
    ssim: float

    def __post_init__(self):
        if self.label not in ex.ALGORITHMS:
            raise ValueError(f"unknown algorithm label {self.label!r}")


def format_table(rows) -> str:
    width = max(len(r.label) for r in rows)
    lines = [f"{'algorithm':<{width}}  {'PSNR':>8}  {'SSIM':>6}"]
    lines += [f"{r.label:<{width}}  {r.psnr:8.3f}  {r.ssim:6.3f}" for r in rows]
    return "\n".join(lines)


def run_comparison(cfg: PipelineConfig, write=True):
    """All nine algorithms on the test volumes; returns ``(rows, timings_ms)``.

    Needs the stage1/stage2/stage3, ``ii`` and ``si`` checkpoints. ``ii_mr``
    defaults to ``ii`` and ``si_mr`` to ``stage1`` when absent.
    """
    loaded = _Loaded(cfg)
    _, s1 = loaded.get("stage1", "completion")
    m2, s2 = loaded.get("stage2", ("spatial", "single"))
    m3, s3 = loaded.get("stage3", "refine")
    _, ii = loaded.get("ii", ("single",))
    ii_mr = loaded.get("ii_mr", ("single",), required=False)
    _, si = loaded.get("si", "completion")
    si_mr = loaded.get("si_mr", "completion", required=False)
    if m2["kind"] != "spatial":
        raise CheckpointMismatchError("the comparison pipeline needs a spatial stage-2 checkpoint")
    models = ex.StageModels(stage1=s1, stage1_cut=si, ii=ii, ii_mr=ii_mr[1] if ii_mr else None,
                            spatial=s2, refine=s3, refine_method=CropMethod.parse(m3.get("crop", "corner")))
    if si_mr is not None:
        models.si_mr = si_mr[1]
    data = prepare_data(cfg)
    timings = {}
    results = ex.compare_algorithms(models, data.subset("test"), cfg.sart, timings=timings)
    rows = [ComparisonRow(a, results[a].psnr, results[a].ssim) for a in ex.ALGORITHMS]
    ms = {k: 1000.0 * float(np.mean(v)) for k, v in timings.items() if v}
    if write:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        _write_metrics_csv(cfg.out_dir / "comparison.csv",
                           [[r.label, f"{r.psnr:.6f}", f"{r.ssim:.6f}"] for r in rows],
                           ["algorithm", "psnr", "ssim"])
        (cfg.out_dir / "comparison.txt").write_text(format_table(rows) + "\n")
        from .plotting import plot_comparison

        plot_comparison(rows, cfg.out_dir / "comparison.png")
    return rows, ms

import json
from pathlib import Path

import numpy as np
import pytest

from lvct import experiment as ex
from lvct.models.stages import CropMethod
from lvct.models.training import TrainConfig
from lvct.pipeline import (
    CheckpointMismatchError,
    ComparisonRow,
    ConfigError,
    load_config,
    load_model,
    prepare_data,
    run_comparison,
    run_pipeline,
    train_command,
)
from lvct.phantom import load_grid

TINY = """\
[geometry]
size = 16
n_angles = 30
n_detectors = 16

[cut]
mode = rear
degrees = 60

[data]
n_train = 2
n_val = 1
n_test = 1
n_slices = 5
n_ellipsoids = 3
seed = 4

[train]
lr = 1e-3
width = 2
batch_size = 4
max_iters = {iters}

[checkpoints]
stage1 = ck/stage1.lvw
stage2 = ck/stage2.lvw
stage3 = ck/stage3.lvw
si = ck/si.lvw
ii = ck/ii.lvw
ii_mr = ck/ii_mr.lvw

[sart_tv]
n_iterations = 3

[run]
seed = 1
out_dir = out
"""


def write_config(root, iters=0, extra=""):
    root.mkdir(parents=True, exist_ok=True)
    path = root / "run.ini"
    path.write_text(TINY.format(iters=iters) + extra)
    return path


def train_everything(cfg):
    train_command(cfg, 1)
    train_command(cfg, 1, source="cut")
    train_command(cfg, 2)
    train_command(cfg, 2, mode="single", input_kind="fbp-cut")
    train_command(cfg, 2, mode="single", input_kind="fbp-merged")
    train_command(cfg, 3)


# ---------------------------------------------------------------- config


def test_load_config_resolves_paths_and_types(tmp_path):
    cfg = load_config(write_config(tmp_path, 7), seed=None)
    assert cfg.geometry == ex.Geometry(16, 30, 16)
    assert cfg.checkpoint("stage1") == tmp_path / "ck" / "stage1.lvw"
    assert cfg.out_dir == tmp_path / "out"
    tc = cfg.train_config("stage1")
    assert isinstance(tc, TrainConfig) and tc.max_iters == 7 and tc.width == 2 and tc.seed == 1
    assert cfg.stage3_crop is CropMethod.CORNER
    assert cfg.sart.n_iterations == 3


def test_seed_precedence(tmp_path, monkeypatch):
    path = write_config(tmp_path)
    assert load_config(path).seed == 1
    monkeypatch.setenv("LVCT_SEED", "5")
    assert load_config(path).seed == 5
    assert load_config(path, seed=9).seed == 9


def test_stage_override_sections(tmp_path):
    path = write_config(tmp_path, 3, "\n[train.stage2]\nmax_iters = 11\n")
    cfg = load_config(path)
    assert cfg.train_config("stage2").max_iters == 11
    assert cfg.train_config("stage1").max_iters == 3
    assert cfg.train_config("stage2").lr == 1e-3


@pytest.mark.parametrize("extra", [
    "\n[bogus]\nx = 1\n",
    "\n[train.stage1]\nlearning_rate = 1\n",
    "\n[stages]\nstage2_mode = temporal\n",
])
def test_config_errors(tmp_path, extra):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, 0, extra))


@pytest.mark.parametrize("old,new", [("degrees = 60", "degrees = 180"), ("mode = rear", "mode = front"),
                                     ("lr = 1e-3", "lr = fast")])
def test_config_invalid_values(tmp_path, old, new):
    path = write_config(tmp_path)
    path.write_text(path.read_text().replace(old, new))
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.ini")


def test_prepared_split_is_disjoint(tmp_path):
    data = prepare_data(load_config(write_config(tmp_path)))
    ids = data.split.train + data.split.val + data.split.test
    assert len(ids) == len(set(ids)) == 4


# ---------------------------------------------------------------- identity-stub pipeline


@pytest.fixture(scope="module")
def stub_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("stub")
    cfg = load_config(write_config(root, 0))
    train_everything(cfg)
    return root, cfg


def test_identity_stub_pipeline_equals_fbp_of_merged(stub_run):
    _, cfg = stub_run
    results, _ = run_pipeline(cfg, write=False)
    data = prepare_data(cfg)
    for case in data.subset("test"):
        assert results[case.case_id].tobytes() == case.fbp_merged.tobytes()


def test_pipeline_writes_outputs_and_is_byte_identical(stub_run, tmp_path):
    root, cfg = stub_run
    run_pipeline(cfg)
    first = {p.relative_to(cfg.out_dir): p.read_bytes() for p in sorted(cfg.out_dir.rglob("*")) if p.is_file()}
    run_pipeline(cfg)
    second = {p.relative_to(cfg.out_dir): p.read_bytes() for p in sorted(cfg.out_dir.rglob("*")) if p.is_file()}
    assert first == second
    names = {str(p) for p in first}
    case = prepare_data(cfg).split.test[0]
    assert {"metrics.csv", f"{case}/slice_000.grid", f"{case}/slice_000.pgm", f"{case}/preview.png"} <= names
    assert load_grid(cfg.out_dir / case / "slice_000.grid").shape == (16, 16)


def test_comparison_has_nine_rows(stub_run):
    _, cfg = stub_run
    rows, ms = run_comparison(cfg)
    assert [r.label for r in rows] == list(ex.ALGORITHMS)
    assert len(rows) == 9
    text = (cfg.out_dir / "comparison.txt").read_text().splitlines()
    assert len(text) == 10
    assert (cfg.out_dir / "comparison.csv").read_text().count("\n") == 10
    assert set(ms) >= {"FBP", "SART-TV"}
    with pytest.raises(ValueError):
        ComparisonRow("CNN", 1.0, 0.5)


def test_checkpoint_sidecar_records_role(stub_run):
    _, cfg = stub_run
    meta = json.loads(Path(str(cfg.checkpoint("stage1")) + ".json").read_text())
    assert meta["kind"] == "completion" and meta["cut"] == {"mode": "rear", "degrees": 60.0}
    assert meta["geometry"] == cfg.geometry.as_dict()
    assert Path(str(cfg.checkpoint("stage1")) + ".log.csv").read_text().startswith(
        "epoch,l_MSE,l_adv,l_reg,l_AE,l_DIS,val_PSNR,val_SSIM")


def test_checkpoint_mismatch_detected(stub_run, tmp_path):
    root, _ = stub_run
    path = write_config(tmp_path)
    text = path.read_text().replace("ck/", f"{root}/ck/")
    path.write_text(text.replace("degrees = 60", "degrees = 90"))
    with pytest.raises(CheckpointMismatchError):
        load_model(load_config(path).checkpoint("stage1"), load_config(path), "completion")
    path.write_text(text.replace("n_angles = 30", "n_angles = 36"))
    with pytest.raises(CheckpointMismatchError):
        run_pipeline(load_config(path), write=False)
    with pytest.raises(CheckpointMismatchError):
        load_model(root / "ck" / "stage2.lvw", expect_kind="completion")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_pipeline(load_config(write_config(tmp_path)), write=False)


def test_trained_checkpoints_are_byte_identical(tmp_path):
    blobs = []
    for run in ("a", "b"):
        cfg = load_config(write_config(tmp_path / run, 3))
        train_command(cfg, 1)
        blobs.append(cfg.checkpoint("stage1").read_bytes())
    assert blobs[0] == blobs[1]
    cfg = load_config(write_config(tmp_path / "c", 3), seed=2)
    train_command(cfg, 1)
    assert cfg.checkpoint("stage1").read_bytes() != blobs[0]


def test_volume_import_path(tmp_path):
    from lvct.phantom import save_grid, volume_phantom

    for i in range(4):
        save_grid(tmp_path / f"vol{i}.grid", volume_phantom(5, 16, seed=i).slices.astype(np.float32))
    extra = "volumes = " + ", ".join(f"vol{i}.grid" for i in range(4)) + "\n"
    path = write_config(tmp_path)
    path.write_text(path.read_text().replace("seed = 4\n", "seed = 4\n" + extra))
    data = prepare_data(load_config(path))
    assert sorted(data.cases) == ["vol0", "vol1", "vol2", "vol3"]
    save_grid(tmp_path / "vol3.grid", np.zeros((5, 8, 8), np.float32))
    with pytest.raises(ConfigError):
        prepare_data(load_config(path))

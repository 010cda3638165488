"""Command-line entry point: ``lvct <command> ...``.

Every file argument is a grid file. Sinogram grids are ``(n_det, n_angles)``
(or a stack ``(S, n_det, n_angles)``) with angles assumed evenly spaced over
[0, 180). Errors print one ``error code=<name> ...`` line to stderr and exit
with a code from :data:`EXIT_CODES`.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .limited_view import AngularMask, MaskedSinogram, cut, merge_radon
from .losses import evaluate
from .nn.checkpoint import CheckpointError
from .phantom import GridError, load_grid, save_grid, shepp_logan, volume_phantom
from .tomo import FilterKind, SartTvConfig, Sinogram, default_angles, fbp_reconstruct, radon_forward, sart_tv_reconstruct

EXIT_CODES = {
    "ok": 0,
    "failure": 1,
    "usage": 2,
    "missing_file": 3,
    "format": 4,
    "invariant": 5,
    "checkpoint": 6,
    "check_failed": 7,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message)


class _Exit(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _fail(code, message):
    msg = " ".join(str(message).split())
    sys.stderr.write(f"error code={code} exit={EXIT_CODES[code]} message={msg}\n")
    raise SystemExit(EXIT_CODES[code])


# ---------------------------------------------------------------- helpers


def _load(path):
    return load_grid(path)


def _as_sinogram(data):
    data = np.asarray(data, dtype=np.float64)
    return Sinogram(data, default_angles(data.shape[1]))


def _stack_apply(arr, fn, rank):
    """Apply ``fn`` to a rank-``rank`` grid or to each entry of a stack of them."""
    if arr.ndim == rank:
        return fn(arr)
    if arr.ndim == rank + 1:
        return np.stack([fn(a) for a in arr])
    raise _Exit("invariant", f"expected a rank {rank} grid or a stack of them, got rank {arr.ndim}")


def _mask_valid(path, n_angles):
    m = _load(path).ravel()
    if m.size != n_angles:
        raise _Exit("invariant", f"mask has {m.size} entries, sinogram has {n_angles} angles")
    if not np.all((m == 0) | (m == 1)):
        raise _Exit("invariant", "mask entries must be 0 or 1")
    return m.astype(bool)


def _size_args(p):
    p.add_argument("--size", type=int, help="output image width and height (default: detector count)")


# ---------------------------------------------------------------- commands


def cmd_phantom(a):
    if a.kind == "shepp-logan":
        out = shepp_logan(a.size)
    else:
        out = volume_phantom(a.slices, a.size, a.ellipsoids, seed=a.seed).slices
    save_grid(a.out, out)


def cmd_radon(a):
    img = _load(a.input)
    ang = default_angles(a.angles)
    save_grid(a.out, _stack_apply(img, lambda x: radon_forward(x, ang, a.detectors).data, 2))


def cmd_fbp(a):
    data = _load(a.input)
    kind = FilterKind.parse(a.filter)

    def one(s):
        sino = _as_sinogram(s)
        size = a.size or sino.n_detectors
        if a.mask:
            valid = _mask_valid(a.mask, sino.n_angles)
            sino = Sinogram(np.where(valid[None, :], sino.data, 0.0), sino.angles)
        return fbp_reconstruct(sino, kind, size, size)

    save_grid(a.out, _stack_apply(data, one, 2))


def cmd_sart_tv(a):
    data = _load(a.input)
    cfg = SartTvConfig(a.iterations, a.relaxation, a.tv_weight, a.tv_steps, a.tv_step_size)

    def one(s):
        sino = _as_sinogram(s)
        size = a.size or sino.n_detectors
        src = sino
        if a.mask:
            valid = _mask_valid(a.mask, sino.n_angles)
            src = MaskedSinogram(Sinogram(np.where(valid[None, :], sino.data, 0.0), sino.angles), AngularMask(valid))
        return sart_tv_reconstruct(src, cfg, size, size)

    save_grid(a.out, _stack_apply(data, one, 2))


def cmd_cut(a):
    data = _load(a.input)
    masks = []

    def one(s):
        m = cut(_as_sinogram(s), a.mode, a.degrees)
        masks.append(m.mask.valid)
        return m.sino.data

    save_grid(a.out, _stack_apply(data, one, 2))
    mask_path = a.mask_out or Path(str(a.out) + ".mask.grid")
    save_grid(mask_path, masks[0].astype(np.float32))


def cmd_merge(a):
    data = _load(a.input)
    kind = FilterKind.parse(a.filter)

    def one(s):
        sino = _as_sinogram(s)
        valid = _mask_valid(a.mask, sino.n_angles)
        size = a.size or sino.n_detectors
        return merge_radon(MaskedSinogram(sino, AngularMask(valid)), kind, (size, size)).data

    save_grid(a.out, _stack_apply(data, one, 2))


def cmd_eval(a):
    pred, gt = _load(a.a), _load(a.b)
    if pred.shape != gt.shape:
        raise _Exit("invariant", f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 3:
        reps = [evaluate(p, g, a.peak) for p, g in zip(pred, gt)]
        rep = type(reps[0])(float(np.mean([r.psnr for r in reps])), float(np.mean([r.ssim for r in reps])))
    else:
        rep = evaluate(pred, gt, a.peak)
    print(str(rep))


def cmd_gradcheck(a):
    from .checks import gradient_suite

    results = gradient_suite(seed=a.seed, encoder_width=a.width, encoder_size=a.size, full=not a.quick)
    for r in results:
        print(r.line())
    if not all(r.ok for r in results):
        bad = ",".join(r.name for r in results if not r.ok)
        raise _Exit("check_failed", f"gradient check exceeded tolerance: {bad}")


def _config(a):
    from .pipeline import load_config

    return load_config(a.config, a.seed)


def cmd_train(stage):
    def run(a):
        from .pipeline import train_command

        cfg = _config(a)
        kw = {}
        if stage == 1:
            kw["source"] = a.source
        elif stage == 2:
            kw["mode"] = a.mode
            kw["input_kind"] = a.input
        else:
            kw["crop"] = a.crop
        path = train_command(cfg, stage, out=a.out, **kw)
        print(f"checkpoint={path}")

    return run


def cmd_pipeline(a):
    from .pipeline import run_pipeline

    cfg = _config(a)
    _, rep = run_pipeline(cfg)
    print(f"{rep} out={cfg.out_dir}")


def cmd_compare(a):
    from .pipeline import format_table, run_comparison

    cfg = _config(a)
    rows, ms = run_comparison(cfg)
    print(format_table(rows))
    # wall-clock figures vary run to run, so they go to stdout only
    for name, v in ms.items():
        print(f"timing {name} ms_per_slice={v:.2f}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lvct", description="Limited-view CT reconstruction and restoration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="write a Shepp-Logan image or a random ellipsoid volume")
    s.add_argument("--kind", choices=("shepp-logan", "volume"), default="shepp-logan")
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--slices", type=int, default=8)
    s.add_argument("--ellipsoids", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("radon", help="parallel-beam forward projection")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--angles", type=int, default=180, help="number of angles over [0, 180)")
    s.add_argument("--detectors", type=int, default=None)
    s.set_defaults(func=cmd_radon)

    for name, func, help_ in (("fbp", cmd_fbp, "filtered backprojection"),
                              ("sart-tv", cmd_sart_tv, "SART with TV regularisation")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("input")
        s.add_argument("--out", required=True)
        s.add_argument("--mask", help="angle mask grid (1 = measured)")
        _size_args(s)
        if name == "fbp":
            s.add_argument("--filter", default="ramlak", choices=[k.value for k in FilterKind])
        else:
            d = SartTvConfig()
            s.add_argument("--iterations", type=int, default=d.n_iterations)
            s.add_argument("--relaxation", type=float, default=d.relaxation)
            s.add_argument("--tv-weight", type=float, default=d.tv_weight)
            s.add_argument("--tv-steps", type=int, default=d.tv_inner_steps)
            s.add_argument("--tv-step-size", type=float, default=d.tv_step_size)
        s.set_defaults(func=func)

    s = sub.add_parser("cut", help="zero a contiguous angular range and write its mask")
    s.add_argument("input")
    s.add_argument("--mode", choices=("rear", "middle"), required=True)
    s.add_argument("--degrees", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mask-out", help="mask path (default: <out>.mask.grid)")
    s.set_defaults(func=cmd_cut)

    s = sub.add_parser("merge", help="fill masked views with the re-projected FBP")
    s.add_argument("input")
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--filter", default="ramlak", choices=[k.value for k in FilterKind])
    _size_args(s)
    s.set_defaults(func=cmd_merge)

    for stage in (1, 2, 3):
        s = sub.add_parser(f"train-stage{stage}", help=f"train the stage-{stage} network from a config")
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="checkpoint path (default: from the config)")
        if stage == 1:
            s.add_argument("--source", choices=("merged", "cut"), default="merged",
                           help="cut trains the sinogram-inpainting baseline")
        elif stage == 2:
            s.add_argument("--mode", choices=("spatial", "single"))
            s.add_argument("--input", choices=("stage1", "fbp-cut", "fbp-merged"), default="stage1",
                           help="fbp-cut / fbp-merged train the image-inpainting baselines")
        else:
            s.add_argument("--crop", choices=("corner", "corner_flip", "random"))
        s.set_defaults(func=cmd_train(stage))

    for name, func, help_ in (("pipeline", cmd_pipeline, "run the three trained stages on the test volumes"),
                              ("compare", cmd_compare, "compare all nine algorithms on the test volumes")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="PSNR and SSIM of a against b")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--peak", type=float, default=1.0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference checks of every layer and loss")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=32, help="encoder width for the full-network check")
    s.add_argument("--size", type=int, default=32, help="encoder input size")
    s.add_argument("--quick", action="store_true", help="layers and losses only")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import CheckpointMismatchError, ConfigError

    try:
        args.func(args)
    except _Exit as e:
        _fail(e.code, e)
    except FileNotFoundError as e:
        _fail("missing_file", e)
    except GridError as e:
        _fail("format", f"{type(e).__name__}: {e}")
    except (CheckpointError, CheckpointMismatchError) as e:
        _fail("checkpoint", e)
    except ConfigError as e:
        _fail("invariant", f"config: {e}")
    except (ValueError, FloatingPointError) as e:
        _fail("invariant", e)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``gsdif <command> ...``.

Exit status: 0 success, 2 usage error, 3 I/O or file-format error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as fio
from .baselines import SartConfig, fdk_reconstruct, sart_reconstruct
from .model import DivergenceError, reconstruct, train
from .projector import drr
from .tto import tto_finetune
from .volume import PhantomSpec, VoxelVolume, generate_phantom, psnr, random_phantom_spec, ssim

EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 2, 3, 4

log = logging.getLogger("gsdif")


class UsageError(Exception):
    pass


def set_workers(n: int):
    torch.set_num_threads(n)
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:  # pragma: no cover
        pass


def _config(args) -> fio.RunConfig:
    return fio.load_config(args.config) if getattr(args, "config", None) else fio.RunConfig()


def cmd_config(args):
    Path(args.out).write_text(fio.RunConfig().to_ini())


def cmd_phantom(args):
    cfg = _config(args)
    if args.spec:
        spec = PhantomSpec.from_json(json.loads(Path(args.spec).read_text()))
    else:
        half = 0.5 * (min(cfg.volume.dims) - 1) * cfg.volume.spacing_mm
        spec = random_phantom_spec(np.random.default_rng(args.seed), half)
    fio.save_volume(args.out, generate_phantom(spec, cfg.volume.dims, cfg.volume.spacing_mm))


def cmd_project(args):
    cfg = _config(args)
    vol = fio.load_volume(args.volume)
    n_r = args.n_r or cfg.volume.drr_samples
    fio.save_projections(args.out, drr(vol, cfg.geometry, n_r))


def _pairs(data_dir: Path):
    vols = sorted(data_dir.glob("*.vol"))
    pairs = []
    for v in vols:
        p = v.with_suffix(".proj")
        if not p.exists():
            raise UsageError(f"{v} has no matching projection file {p.name}")
        pairs.append((fio.load_volume(v), fio.load_projections(p)))
    if not pairs:
        raise UsageError(f"no .vol/.proj pairs found in {data_dir}")
    return pairs


def cmd_train(args):
    cfg = _config(args)
    mcfg = cfg.model
    if args.epochs is not None:
        mcfg.training.epochs = args.epochs
    if args.no_gaussians:
        mcfg.enable_gaussians = False
    dataset = _pairs(Path(args.data))
    res = train(dataset, mcfg, seed=args.seed)
    fio.save_checkpoint(args.out, res.params, mcfg)
    if args.loss_log:
        with open(args.loss_log, "w") as fh:
            fh.write("epoch,lr,mse\n")
            for epoch, lr, mse in res.loss_log:
                fh.write(f"{epoch},{lr!r},{mse!r}\n")


def _out_grid(args, cfg: fio.RunConfig):
    dims = tuple(args.dims) if args.dims else cfg.volume.dims
    spacing = args.spacing if args.spacing else cfg.volume.spacing_mm
    return dims, spacing


def cmd_reconstruct(args):
    cfg = _config(args)
    proj = fio.load_projections(args.proj)
    dims, spacing = _out_grid(args, cfg)
    if args.checkpoint:
        params, mcfg = fio.load_checkpoint(args.checkpoint)
        if mcfg.k_views != proj.geometry.n_views:
            raise UsageError(
                f"checkpoint expects K={mcfg.k_views} views but {args.proj} has K={proj.geometry.n_views}"
            )
        if (mcfg.det_nu, mcfg.det_nv) != proj.geometry.det_shape:
            raise UsageError(
                f"checkpoint expects a {mcfg.det_nu}x{mcfg.det_nv} detector, projections are "
                f"{proj.geometry.det_shape[0]}x{proj.geometry.det_shape[1]}"
            )
        vol = reconstruct(params, proj, mcfg, dims, spacing)
    elif args.method == "sart":
        vol = sart_reconstruct(proj, proj.geometry, dims, spacing, SartConfig(iterations=args.iterations))
    else:
        vol = fdk_reconstruct(proj, proj.geometry, dims, spacing)
    fio.save_volume(args.out, vol)


def cmd_tto(args):
    cfg = _config(args)
    params, mcfg = fio.load_checkpoint(args.checkpoint)
    proj = fio.load_projections(args.proj)
    if mcfg.k_views != proj.geometry.n_views:
        raise UsageError(f"checkpoint expects K={mcfg.k_views} views but {args.proj} has K={proj.geometry.n_views}")
    tcfg = cfg.tto
    if args.steps is not None:
        tcfg.steps = args.steps
    tuned, losses = tto_finetune(params, proj, mcfg, tcfg, seed=args.seed)
    fio.save_checkpoint(args.out, tuned, mcfg)
    if args.loss_log:
        with open(args.loss_log, "w") as fh:
            fh.write("step,loss\n")
            for step, loss in losses:
                fh.write(f"{step},{loss!r}\n")


def cmd_eval(args):
    a, b = fio.load_volume(args.a), fio.load_volume(args.b)
    if a.data.shape != b.data.shape:
        raise UsageError(f"volume shapes differ: {a.dims} vs {b.dims}")
    print(f"psnr_db={psnr(a, b, args.data_range):.4f}, ssim={ssim(a, b, args.data_range):.4f}")


def write_pgm(path, img: np.ndarray):
    """Binary P5 graymap, linear 8-bit scaling of [0, 1]."""
    rows, cols = img.shape
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + px.tobytes())


def slice_image(vol: VoxelVolume, axis: str, index: int) -> np.ndarray:
    nx, ny, nz = vol.dims
    limit = {"x": nx, "y": ny, "z": nz}[axis]
    if not 0 <= index < limit:
        raise UsageError(f"slice index {index} out of range for axis {axis} (size {limit})")
    if axis == "z":
        return vol.data[index]
    if axis == "y":
        return vol.data[:, index, :]
    return vol.data[:, :, index]


def cmd_slice(args):
    vol = fio.load_volume(args.volume)
    write_pgm(args.out, slice_image(vol, args.axis, args.index))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsdif", description=__doc__.splitlines()[0])
    ap.add_argument("--workers", type=int, default=1, help="compute threads (results do not depend on it)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="write the default run configuration")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("phantom", help="rasterise a phantom volume")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--spec", help="JSON list of ellipsoids; random torso phantom if omitted")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="simulate projections of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--config")
    p.add_argument("--n-r", type=int, dest="n_r")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train on a directory of NAME.vol / NAME.proj pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-gaussians", action="store_true", help="2D-only ablation")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct a volume from projections")
    p.add_argument("--proj", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--method", choices=("sart", "fdk"))
    p.add_argument("--iterations", type=int, default=30, help="SART iterations")
    p.add_argument("--config")
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--spacing", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("tto", help="test-time optimisation of a checkpoint on one projection stack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--proj", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log")
    p.set_defaults(func=cmd_tto)

    p = sub.add_parser("eval", help="PSNR/SSIM between two volumes")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--data-range", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("slice", help="export a volume slice as a binary PGM")
    p.add_argument("volume")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)
    return ap


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    set_workers(args.workers)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"gsdif: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, fio.FormatError) as exc:
        print(f"gsdif: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"gsdif: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"gsdif: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()

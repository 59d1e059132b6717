"""Command-line entry point: ``silsdf <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_RUNTIME = 5

THREADS_ENV = "SILSDF_THREADS"

log = logging.getLogger("silsdf")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _existing(path, what="file") -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", EXIT_MISSING)
    return p


def cmd_synth(args):
    from .scenes import preset
    from .synth import generate_dataset

    try:
        scene = preset(args.scene)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from e
    kwargs = {} if args.focal is None else {"focal": args.focal}
    generate_dataset(
        scene,
        args.out,
        n_views=args.views,
        resolution=args.res,
        distance=args.distance,
        elevation_deg=args.elevation,
        seed=args.seed,
        **kwargs,
    )
    print(f"wrote {args.views} views of '{args.scene}' to {args.out}")


def cmd_pretrain(args):
    from .fields import FieldNet, pretrain_sphere, save_checkpoint

    net = FieldNet(width=args.width, enc_levels=args.enc_levels, seed=args.seed)
    pretrain_sphere(net, radius=args.radius, iters=args.iters, points=args.points, seed=args.seed, lr=args.lr)
    save_checkpoint(net, args.out)
    print(f"pretrained sphere r={args.radius}: final mse {net.pretrain_mse:.3e} -> {args.out}")


def _load_net(path):
    from .fields import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(_existing(path, "checkpoint"))
    except (CheckpointError, KeyError, ValueError) as e:
        raise CliError(f"bad checkpoint {path}: {e}", EXIT_SCHEMA) from e


def cmd_fit(args):
    from .losses import DivergenceError, LossWeights, TrainConfig, fit_scene
    from .synth import load_dataset

    data = _existing(args.data, "dataset directory")
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(_existing(args.config, "config").read_text())
        except json.JSONDecodeError as e:
            raise CliError(f"config is not valid JSON: {e}", EXIT_SCHEMA) from e
    weights = cfg.pop("weights", {})
    for flag, key in (("iters", "iterations"), ("seed", "seed"), ("lr", "learning_rate")):
        if getattr(args, flag) is not None:
            cfg[key] = getattr(args, flag)
    try:
        config = TrainConfig.from_dict(cfg)
        weights = LossWeights(**weights)
    except (TypeError, ValueError) as e:
        raise CliError(f"config schema: {e}", EXIT_SCHEMA) from e
    try:
        views = load_dataset(data)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot load dataset {data}: {e}", EXIT_SCHEMA) from e
    net = _load_net(args.init)
    try:
        result = fit_scene(views, net, config, weights, log_path=args.log, checkpoint_path=args.out)
    except DivergenceError as e:
        raise CliError(f"training diverged ({e}); last good parameters saved to {args.out}", EXIT_RUNTIME) from e
    final = result.log[-1] if result.log else {}
    print(f"fit {config.iterations} iterations in {result.seconds:.1f}s; final total {final.get('total', float('nan')):.5g}")


def cmd_extract(args):
    from .mesh import marching_cubes, write_ply

    net = _load_net(args.ckpt)
    mesh = marching_cubes(net, resolution=args.res, roi=(-args.roi, args.roi))
    write_ply(mesh, args.out)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {args.out}")


def cmd_render(args):
    from .geometry import Camera, CameraError
    from .netpbm import write_rgb
    from .renderer import render_image

    net = _load_net(args.ckpt)
    try:
        cam = Camera.load(_existing(args.camera, "camera"))
    except CameraError as e:
        raise CliError(str(e), EXIT_SCHEMA) from e
    write_rgb(args.out, render_image(net, cam, steps=args.steps, bisections=args.bisections))
    print(f"rendered {cam.width}x{cam.height} -> {args.out}")


def _load_cloud(path, n, seed):
    from .mesh import PlyError, read_ply, sample_surface_points
    from .metrics import read_points

    path = _existing(path)
    try:
        if path.suffix.lower() == ".ply":
            mesh = read_ply(path)
            if len(mesh.triangles):
                return sample_surface_points(mesh, n, seed)
            return mesh.vertices
        return read_points(path)
    except (PlyError, ValueError) as e:
        raise CliError(str(e), EXIT_SCHEMA) from e


def cmd_eval(args):
    from .metrics import chamfer, icp_register

    pred = _load_cloud(args.pred, args.points, args.seed)
    gt = _load_cloud(args.gt, args.points, args.seed + 1)
    report = {}
    if args.icp:
        reg = icp_register(pred, gt, iters=args.icp_iters)
        pred = reg.registered
        report["icp"] = {"R": reg.R.tolist(), "t": reg.t.tolist()}
    acc, cov = chamfer(pred, gt, squared=args.squared)
    report.update({"accuracy": acc, "coverage": cov, "squared": args.squared})
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)


def cmd_check_bound(args):
    from .synth import audit_lower_bound, load_dataset, load_scene

    data = _existing(args.data, "dataset directory")
    try:
        scene = load_scene(data)
        views = load_dataset(data)
    except (KeyError, ValueError, OSError) as e:
        raise CliError(f"cannot load dataset {data}: {e}", EXIT_SCHEMA) from e
    bad, checked = audit_lower_bound(scene, views, n_depths=args.depths, rng=args.seed)
    print(f"{bad} violations in {checked} samples")
    return EXIT_OK if bad == 0 else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="silsdf", description="Signed distance fields from posed silhouettes.")
    p.add_argument("--threads", type=int, default=None, help=f"worker thread cap (default: ${THREADS_ENV} or 1)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, ordered reductions")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset from an analytic scene")
    s.add_argument("--scene", default="sphere")
    s.add_argument("--views", type=int, default=24)
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--distance", type=float, default=2.0)
    s.add_argument("--elevation", type=float, default=15.0)
    s.add_argument("--focal", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="fit a fresh field to a centered sphere")
    s.add_argument("--radius", type=float, default=0.5)
    s.add_argument("--iters", type=int, default=2000)
    s.add_argument("--points", type=int, default=10_000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--enc-levels", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("fit", help="optimize a field on one dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None, help="TrainConfig JSON (optional 'weights' object)")
    s.add_argument("--init", required=True, help="pretrained checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--log", default=None, help="CSV loss log")
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("extract", help="marching cubes on a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--res", type=int, default=128)
    s.add_argument("--roi", type=float, default=1.0, help="half-width of the sampled cube")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("render", help="render a checkpoint from a camera")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--bisections", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="Chamfer accuracy/coverage between two shapes")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--icp", action="store_true")
    s.add_argument("--icp-iters", type=int, default=50)
    s.add_argument("--points", type=int, default=10_000, help="samples drawn from meshes")
    s.add_argument("--squared", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check-bound", help="audit the silhouette bound against the analytic scene")
    s.add_argument("--data", required=True)
    s.add_argument("--depths", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_check_bound)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = args.threads or int(os.environ.get(THREADS_ENV, "1"))
    torch.set_num_threads(1 if args.deterministic else max(1, threads))
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        code = args.func(args)
    except CliError as e:
        print(f"silsdf {args.command}: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"silsdf {args.command}: {e}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK if code is None else code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

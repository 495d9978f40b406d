"""Command line entry point: ``single``, ``multi``, ``fit`` and ``render``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_profile
from .errors import HandoverError, InsufficientObservation, IoFailure
from .harness import (
    NEEDLE_RADII,
    ExperimentSpec,
    Fault,
    Mode,
    build_world,
    emit_results,
    format_table,
    run_multi,
    run_single_grid,
)
from .perception import RansacParams, debug_overlay, estimate_state, read_pgm, write_pgm, write_ppm
from .sim import Direction, Face, all_configs, build_scene, render_masks

log = logging.getLogger("needle_handover")

DIRECTIONS = {d.value: d for d in Direction}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--needle", type=int, choices=sorted(NEEDLE_RADII), default=1)
    p.add_argument("--direction", choices=sorted(DIRECTIONS), default="l2r")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--noise-profile", default="calibrated",
                   help="'calibrated', 'zero', or a config file path")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _experiment(p: argparse.ArgumentParser) -> None:
    _common(p)
    p.add_argument("--trials", type=int, default=1, help="seeds per configuration")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--variant", default="closed-loop", help="label for the result row")
    p.add_argument("--fault", choices=[f.value for f in Fault], default="none")
    p.add_argument("--occlusion-radius", type=float, default=None,
                   help="gripper occlusion disk radius in meters")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="needle-handover",
                                 description="Simulated stereo needle handover experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("single", help="one handover per start configuration and seed")
    _experiment(p)

    p = sub.add_parser("multi", help="repeated handovers until failure or the limit")
    _experiment(p)
    p.add_argument("--config", choices=[f.value for f in Face], default="towards")
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--fault-at", type=int, default=0,
                   help="handover index for --fault p-at")

    p = sub.add_parser("fit", help="estimate the needle from a PGM mask pair")
    _common(p)
    p.add_argument("left", type=Path)
    p.add_argument("right", type=Path)
    p.add_argument("--gripper", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))

    p = sub.add_parser("render", help="write the masks of a start configuration")
    _common(p)
    p.add_argument("--config", default="towards-tip-0", help="configuration key, e.g. away-inward30-3")
    return ap


def _spec(args, mode: Mode) -> ExperimentSpec:
    extra = {}
    if mode is Mode.Multi:
        extra = dict(multi_config=Face(args.config), n_max_handoffs=args.n_max, fault_at=args.fault_at)
    return ExperimentSpec(
        mode=mode, needle_id=args.needle, direction=DIRECTIONS[args.direction],
        trials_per_config=args.trials, base_seed=args.seed, profile=load_profile(args.noise_profile),
        variant=args.variant, fault=Fault(args.fault), occlusion_radius=args.occlusion_radius,
        workers=args.workers, **extra)


def cmd_experiment(args, mode: Mode) -> int:
    spec = _spec(args, mode)
    table = run_single_grid(spec) if mode is Mode.Single else run_multi(spec)
    print(format_table(table))
    if args.out is not None:
        for path in emit_results(table, args.out, spec, stem=mode.value):
            print(f"wrote {path}")
    return 0


def _dump_json(obj, path: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def cmd_fit(args) -> int:
    prof = load_profile(args.noise_profile)
    rig = build_scene(prof.scene).rig
    radius = prof.needle.radius or NEEDLE_RADII[args.needle]
    left, right = read_pgm(args.left), read_pgm(args.right)
    params = RansacParams(prof.ransac.inlier_radius, prof.ransac.iterations, args.seed,
                          prof.ransac.min_inliers, prof.ransac.min_spread)
    try:
        est = estimate_state((left, right), rig, np.array(args.gripper), radius, params)
    except InsufficientObservation as exc:
        _dump_json({"ok": False, "reason": str(exc), "inliers": exc.inlier_count}, None)
        return 0
    out = {
        "ok": True,
        "center": est.center.tolist(),
        "normal": est.normal.tolist(),
        "radius": est.circle.radius,
        "tip": np.asarray(est.tip).tolist(),
        "inliers": est.inlier_count,
        "rms_residual": est.fit.rms_residual,
    }
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_ppm(args.out / "overlay_left.ppm", debug_overlay(left, rig.left, est))
        _dump_json(out, args.out / "estimate.json")
    _dump_json(out, None)
    return 0


def cmd_render(args) -> int:
    keys = {c.key: (i, c) for i, c in enumerate(all_configs())}
    if args.config not in keys:
        raise HandoverError(f"unknown configuration {args.config!r}")
    index, config = keys[args.config]
    spec = ExperimentSpec(mode=Mode.Render, needle_id=args.needle, direction=DIRECTIONS[args.direction],
                          profile=load_profile(args.noise_profile))
    world = build_world(spec, config, args.seed, index, spec.direction)
    out = args.out or Path(".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    bundle = render_masks(world)
    for name, mask in (("left", bundle.left_mask), ("right", bundle.right_mask),
                       ("overhead", bundle.overhead_mask)):
        write_pgm(out / f"{name}.pgm", mask)
    meta = {
        "config": config.key,
        "seed": args.seed,
        "needle_radius": spec.radius,
        "gripper": world.commanded(world.holder).translation.tolist(),
        "needle_center": world.needle.circle.center.tolist(),
        "needle_normal": world.needle.circle.normal.tolist(),
        "needle_tip": world.needle.tip.tolist(),
    }
    _dump_json(meta, out / "scene.json")
    print(f"wrote left.pgm right.pgm overhead.pgm scene.json to {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "single":
            return cmd_experiment(args, Mode.Single)
        if args.command == "multi":
            return cmd_experiment(args, Mode.Multi)
        if args.command == "fit":
            return cmd_fit(args)
        return cmd_render(args)
    except (HandoverError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

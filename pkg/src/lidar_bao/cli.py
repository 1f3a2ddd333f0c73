"""Command-line entry point: run odometry, synthesise datasets, score trajectories."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .geom import RigidTransform
from .pipeline import OdometryConfig, ate_rmse, load_config, run_dataset
from .scan_io import read_trajectory, write_scan_directory, write_trajectory
from .synthetic import (
    BeamModel,
    ConstantVelocityTrajectory,
    WorldConfig,
    corridor_world,
    generate_world,
    simulate_sequence,
    square_loop_trajectory,
    square_loop_world,
)

WORLDS = ("corridor", "loop", "random")
TRAJECTORIES = ("line", "static", "square")


def _world_config(path: str) -> tuple[WorldConfig, int]:
    """key=value file for a random world; ``seed`` picks the layout."""
    cfg, seed = WorldConfig(), 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key == "seed":
            seed = int(value)
        elif key in ("n_planes", "n_edges"):
            setattr(cfg, key, int(value))
        elif key in ("bounds_min", "bounds_max", "plane_half_extent", "edge_half_length"):
            setattr(cfg, key, tuple(float(v) for v in value.replace(",", " ").split()))
        else:
            raise ValueError(f"world config line {lineno}: unknown key {key!r}")
    return cfg, seed


def _synth(args) -> int:
    if args.trajectory == "square":
        traj = square_loop_trajectory()
    else:
        speed = 0.0 if args.trajectory == "static" else args.speed
        traj = ConstantVelocityTrajectory(RigidTransform(np.eye(3), [0.0, 0.0, 1.8]), np.array([speed, 0.0, 0.0]),
                                          np.zeros(3))
    if args.world == "corridor":
        world = corridor_world(seed=args.seed)
    elif args.world == "loop":
        world = square_loop_world(square_loop_trajectory(), seed=args.seed)
    elif args.world == "random":
        world = generate_world(WorldConfig(), args.seed)
    else:
        wcfg, seed = _world_config(args.world)
        world = generate_world(wcfg, seed)
    beam = BeamModel(columns=args.columns, rings=args.rings)
    scans, gt = simulate_sequence(world, traj, args.scans, beam=beam, noise_sigma=args.noise, seed=args.seed)
    out = Path(args.out)
    write_scan_directory(scans, out / "scans")
    write_trajectory(gt, out / "groundtruth.txt")
    print(f"wrote {len(scans)} scans to {out / 'scans'} and ground truth to {out / 'groundtruth.txt'}")
    return 0


def _run(args) -> int:
    cfg = load_config(args.config) if args.config else OdometryConfig()
    cfg.dataset = args.dataset
    cfg.out = args.out
    cfg.gt = args.gt or cfg.gt
    cfg.report = args.report or cfg.report
    cfg.trace = args.trace or cfg.trace
    cfg.report_timing = cfg.report_timing or args.timing
    if args.seed is not None:
        cfg.seed = args.seed
    report = run_dataset(cfg)
    print(f"odometry trajectory: {len(report.records)} poses written to {cfg.out}")
    stages = ", ".join(f"{k} {v:.1f}" for k, v in report.mean_stage_ms.items())
    print(f"mean per-scan time: {report.mean_time_ms:.1f} ms ({stages})")
    if report.ate is not None:
        print(f"ATE RMSE: {report.ate:.6f} m")
    return 0


def _eval(args) -> int:
    print(f"{ate_rmse(read_trajectory(args.est), read_trajectory(args.gt)):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidar-bao", description="Sliding-window LiDAR bundle-adjustment odometry.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="estimate the odometry trajectory of a scan directory")
    r.add_argument("--dataset", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--gt")
    r.add_argument("--report")
    r.add_argument("--trace", help="write LM cost rows 'scan iter cost'")
    r.add_argument("--timing", action="store_true", help="put wall times in the report table")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=_run)

    s = sub.add_parser("synth", help="generate a synthetic scan directory with ground truth")
    s.add_argument("--world", default="corridor", help=f"one of {', '.join(WORLDS)} or a key=value file")
    s.add_argument("--trajectory", default="line", choices=TRAJECTORIES)
    s.add_argument("--out", required=True)
    s.add_argument("--scans", type=int, default=50)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--speed", type=float, default=5.0)
    s.add_argument("--columns", type=int, default=1800)
    s.add_argument("--rings", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_synth)

    e = sub.add_parser("eval", help="print the ATE RMSE of an estimate against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

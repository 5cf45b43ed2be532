"""Command-line entry point: ``lidarba <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .checks import check_derivatives
from .metrics import evaluate_drift
from .pipeline import PipelineConfig, PipelineState, run
from .synth import SceneSpec, corridor_loop_scene, generate_scene, room_scene

log = logging.getLogger("lidarba")


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        io.ensure_parent(path)
        Path(path).write_text(text)


def _load_config(args) -> PipelineConfig:
    d = {}
    if args.config:
        with open(args.config) as f:
            d = json.load(f)
        if not isinstance(d, dict):
            raise ValueError("config file must hold a JSON object")
    if args.window is not None:
        d["window_size"] = args.window
    if args.refine_every is not None:
        d["refine_every"] = args.refine_every
    if args.no_refine:
        d["refine_every"] = None
    return PipelineConfig.from_dict(d)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.spec:
        spec = SceneSpec.from_json(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
    else:
        seed = 0 if args.seed is None else args.seed
        spec = room_scene(seed=seed) if args.scene == "room" else corridor_loop_scene(seed=seed)
    scene = generate_scene(spec)
    out = Path(args.out)
    io.save_scans(out, scene.scans)
    ids = [s.scan_id for s in scene.scans]
    io.save_trajectory(out / "truth.traj", list(zip(ids, scene.truth)))
    io.save_trajectory(out / "initial.traj", list(zip(ids, scene.initial)))
    log.info("wrote %d scans to %s", len(scene.scans), out)
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    scans = io.load_scans(args.scans)
    state = PipelineState(cfg)
    traj, stats = run(scans, state=state)
    io.ensure_parent(args.out)
    io.save_trajectory(args.out, traj)
    if args.stats:
        d = stats.to_dict()
        if args.no_timing:
            for key in ("odometry_ms", "refine_ms"):
                d.pop(key)
        d["config"] = cfg.to_dict()
        _write_json(args.stats, d)
    if args.voxels:
        _write_json(args.voxels, _voxel_dump(state))
    return 0


def _voxel_dump(state: PipelineState) -> dict:
    return {vmap.kind.value: vmap.dump() for vmap in state.maps}


def cmd_dump_voxels(args) -> int:
    cfg = _load_config(args)
    state = PipelineState(cfg)
    run(io.load_scans(args.scans), state=state)
    _write_json(args.out, _voxel_dump(state))
    return 0


def cmd_check(args) -> int:
    rep = check_derivatives(args.seed, args.trials, pose=not args.no_pose)
    d = rep.to_dict()
    _write_json(args.out, d)
    return 0 if rep.passed else 1


def cmd_eval(args) -> int:
    traj = io.load_trajectory(args.trajectory)
    truth = io.load_trajectory(args.truth) if args.truth else None
    _write_json(args.out, evaluate_drift(traj, truth).to_dict())
    return 0


# ------------------------------------------------------------------ parser


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with pipeline settings")
    p.add_argument("--window", type=int, help="sliding window size (default 20)")
    p.add_argument("--refine-every", type=int, help="scans between refinements (default 5)")
    p.add_argument("--no-refine", action="store_true", help="odometry only, no window refinement")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lidarba", description="Eigenvalue lidar bundle adjustment tools.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic scene as scan files plus truth")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="scene spec JSON")
    src.add_argument("--scene", choices=("room", "corridor"), help="built-in scene")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="odometry and window refinement over a scan directory")
    p.add_argument("scans", help="directory of scan files")
    p.add_argument("--out", required=True, help="trajectory output file")
    p.add_argument("--stats", help="stats JSON output ('-' for stdout)")
    p.add_argument("--voxels", help="final voxel map JSON output")
    p.add_argument("--no-timing", action="store_true", help="leave wall-clock timings out of the stats")
    _pipeline_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check-derivatives", help="finite-difference check of the analytic derivatives")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-pose", action="store_true", help="point-space oracle only")
    p.add_argument("--out", default="-", help="report JSON output (default stdout)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("eval", help="drift report for a trajectory")
    p.add_argument("trajectory")
    p.add_argument("--truth", help="ground-truth trajectory; loop mode when omitted")
    p.add_argument("--out", default="-", help="report JSON output (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-voxels", help="run the pipeline and write the final voxel map")
    p.add_argument("scans", help="directory of scan files")
    p.add_argument("--out", default="-", help="JSON output (default stdout)")
    _pipeline_flags(p)
    p.set_defaults(func=cmd_dump_voxels)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # usage errors exit with status 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError, ArithmeticError) as e:
        print(f"lidarba: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: scenes, episodes, ablation suites, inspection.

Exit codes: 0 success, 1 usage or validation problem, 2 runtime failure.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, matching, selftest, simulator
from .control import CONTROLLER_IDS
from .errors import (
    DimensionMismatch,
    InvalidConfig,
    IoFailure,
    SchemaMismatch,
    ServoKitError,
    UnknownSuite,
)

_VALIDATION_ERRORS = (InvalidConfig, UnknownSuite, SchemaMismatch, DimensionMismatch)


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="servokit",
                     description="Visual-servo geometry, control, and benchmark toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-scene", help="write a synthetic scene JSON")
    gen.add_argument("--out", required=True, help="output scene path")
    gen.add_argument("--config", help="episode config supplying scene defaults")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--points", type=int)
    gen.add_argument("--repetition", type=int)
    gen.add_argument("--scale", type=float)

    run = sub.add_parser("run", help="run one servo episode")
    run.add_argument("--config", help="episode config JSON")
    run.add_argument("--seed", type=int)
    run.add_argument("--controller", choices=CONTROLLER_IDS)
    run.add_argument("--scene", help="scene JSON (default: generated from the seed)")
    run.add_argument("--out", help="output directory for trajectory.jsonl and summary.json")

    abl = sub.add_parser("ablate", help="run an ablation suite and write CSV")
    abl.add_argument("--suite", required=True)
    abl.add_argument("--out", required=True, help="output CSV path")
    abl.add_argument("--config", help="base episode config JSON")
    abl.add_argument("--seed", type=int, default=0, help="master seed")
    abl.add_argument("--episodes", type=int, default=20)
    abl.add_argument("--parallel", type=int, default=1)

    ins = sub.add_parser("inspect-p2g", help="transfer a stored score matrix onto anchors")
    ins.add_argument("--in", dest="input", required=True, help="score matrix container")
    ins.add_argument("--out", required=True, help="output tensor container")
    ins.add_argument("--anchors", type=int, default=16)
    ins.add_argument("--shift", default="1,1", help="dx,dy used by the equivariance check")
    ins.add_argument("--report", help="optional JSON report path")

    sub.add_parser("verify", help="run the invariant self-checks")
    return parser


def _load_config(path, seed=None, controller=None) -> simulator.EpisodeConfig:
    config = simulator.read_config(path) if path else simulator.EpisodeConfig()
    if seed is not None:
        config = replace(config, seed=seed)
    if controller is not None:
        config = replace(config, controller=controller)
    return config


def _cmd_gen_scene(args) -> int:
    config = _load_config(args.config)
    scene_cfg = config.scene
    overrides = {}
    if args.points is not None:
        overrides["num_points"] = args.points
    if args.repetition is not None:
        overrides["repetition"] = args.repetition
    if args.scale is not None:
        overrides["scale"] = args.scale
    try:
        scene_cfg = replace(scene_cfg, **overrides)
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from exc
    scene = simulator.generate_scene(scene_cfg, args.seed)
    simulator.write_scene(args.out, scene)
    print(f"wrote {args.out}: {scene.points.shape[0]} points, scale {scene.scale:g}")
    return 0


def _result_dict(result: simulator.EpisodeResult) -> dict:
    return {
        "success": result.success,
        "te_mm": result.te_mm,
        "re_deg": result.re_deg,
        "steps": result.steps,
        "diverged": result.diverged,
        "failure_reason": result.failure_reason,
        "mode_switch_step": result.mode_switch_step,
        "initial_te_mm": result.initial_te_mm,
        "initial_re_deg": result.initial_re_deg,
    }


def _cmd_run(args) -> int:
    config = _load_config(args.config, seed=args.seed, controller=args.controller)
    scene_seed, episode_seed = bench.episode_seeds(config.seed, 0)
    if args.scene:
        scene = simulator.read_scene(args.scene)
    else:
        scene = simulator.generate_scene(config.scene, scene_seed)
    config = replace(config, seed=episode_seed)
    controller = simulator.build_controller(config)
    result = simulator.run_episode(scene, controller, config)
    summary = {
        "config": simulator.config_to_dict(config),
        "metadata": {
            "scene_source": args.scene or f"generated(seed={scene_seed})",
            "tt_units": "controller steps",
            "thresholds_are_toolkit_defaults": args.config is None,
        },
        "result": _result_dict(result),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trajectory.jsonl", "w") as fh:
            for record in result.trajectory:
                fh.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, sort_keys=True, indent=2)
            fh.write("\n")
    print(json.dumps(summary["result"], sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    base = _load_config(args.config)
    cells = bench.run_ablation(args.suite, base=base, master_seed=args.seed,
                               episodes=args.episodes, parallel=args.parallel)
    rows = [(c.suite, c.cell, c.summary) for c in cells]
    bench.write_results(args.out, rows)
    bench.write_metadata(str(args.out) + ".meta.json", args.suite, args.seed,
                         args.episodes, cells)
    for c in cells:
        print(f"{c.suite} {c.cell}: SR {c.summary.sr_num}/{c.summary.sr_den}")
    return 0


def _cmd_inspect_p2g(args) -> int:
    try:
        dx, dy = (int(v) for v in args.shift.split(","))
    except ValueError as exc:
        raise InvalidConfig(f"--shift must be 'dx,dy', got {args.shift!r}") from exc
    score = matching.read_score_matrix(args.input)
    tensor = matching.particles_to_grid(score, args.anchors)
    matching.write_probmatch(args.out, tensor)
    report = equivariance_report(score, args.anchors, (dx, dy))
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def equivariance_report(score: matching.ScoreMatrix, anchors: int, shift: tuple) -> dict:
    """Shift both matched patch sets of a stored matrix and compare transfers.

    Compares only rows where equality is exact by construction: the row's
    mass must stay in-grid under the shift, and the kernel windows of its
    mass-carrying anchors must fit inside the displacement range of both the
    original and the shifted row (otherwise the kernel-weight normalization
    legitimately differs near the boundary).
    """
    dx, dy = shift
    h, w = score.source_shape
    n = h * w
    gx = 2.0 * w / anchors
    gy = 2.0 * h / anchors
    reach_x = 3.0 * gx  # anchors within 1.5g of mass, their windows 1.5g further
    reach_y = 3.0 * gy
    values = score.values.reshape(h, w, h, w)
    moved = np.full((h, w, h, w), 1.0 / n)
    valid = np.zeros((h, w), dtype=bool)

    def window_fits(block: np.ndarray, x: int, y: int) -> bool:
        ky, kx = np.nonzero(block > 1e-15)
        lo_x, hi_x = kx.min() - x - reach_x, kx.max() - x + reach_x
        lo_y, hi_y = ky.min() - y - reach_y, ky.max() - y + reach_y
        for ox, oy in ((0, 0), (dx, dy)):
            if lo_x < -(x + ox) or hi_x > w - 1 - (x + ox):
                return False
            if lo_y < -(y + oy) or hi_y > h - 1 - (y + oy):
                return False
        return True

    def shift_plane(block: np.ndarray) -> tuple[np.ndarray, float]:
        src_y = slice(max(0, -dy), h - max(0, dy))
        src_x = slice(max(0, -dx), w - max(0, dx))
        dst_y = slice(max(0, dy), h - max(0, -dy))
        dst_x = slice(max(0, dx), w - max(0, -dx))
        plane = np.zeros((h, w))
        plane[dst_y, dst_x] = block[src_y, src_x]
        return plane, float(plane.sum())

    for y in range(h):
        for x in range(w):
            ty, tx = y + dy, x + dx
            if not (0 <= ty < h and 0 <= tx < w):
                continue
            plane, kept = shift_plane(values[y, x])
            if abs(kept - 1.0) > 1e-9 or not window_fits(values[y, x], x, y):
                continue
            moved[ty, tx] = plane
            valid[ty, tx] = True
    base_tensor = matching.particles_to_grid(score, anchors).values
    moved_tensor = matching.particles_to_grid(
        matching.ScoreMatrix(moved.reshape(n, n), (h, w), (h, w)), anchors).values
    deviations = []
    for y in range(h):
        for x in range(w):
            if valid[y, x]:
                deviations.append(float(np.max(np.abs(
                    moved_tensor[y, x] - base_tensor[y - dy, x - dx]))))
    return {
        "shift": [dx, dy],
        "anchors_per_axis": anchors,
        "channel_size": anchors * anchors,
        "rows_compared": len(deviations),
        "max_deviation": max(deviations) if deviations else None,
        "equivariant_at_1e-9": bool(deviations) and max(deviations) < 1e-9,
    }


def _cmd_verify(_args) -> int:
    _, failed = selftest.run_all(out=print)
    return 0 if failed == 0 else 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "gen-scene": _cmd_gen_scene,
        "run": _cmd_run,
        "ablate": _cmd_ablate,
        "inspect-p2g": _cmd_inspect_p2g,
        "verify": _cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(f"servokit: {exc}", file=sys.stderr)
        return 1
    except IoFailure as exc:
        print(f"servokit: {exc}", file=sys.stderr)
        return 2
    except ServoKitError as exc:
        print(f"servokit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

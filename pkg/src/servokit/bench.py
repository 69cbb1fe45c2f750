"""Batch metrics, ablation suites, and results persistence.

Batches aggregate episode outcomes into success ratios and per-success
error statistics (population standard deviation). Ablation suites vary one
axis of the environment or controller against a shared, counter-derived
seed set so comparisons across cells are paired.
"""

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .control import CANONICAL_INTRINSICS
from .errors import IoFailure, SchemaMismatch, UnknownSuite
from .geometry import CameraIntrinsics
from .simulator import (
    EpisodeConfig,
    EpisodeResult,
    NoiseModel,
    build_controller,
    config_to_dict,
    generate_scene,
    run_episode,
)

SUITE_IDS = ("denorm-aware", "denorm-unaware", "hybrid-vs-pbvs",
             "probabilistic-vs-explicit", "noise-sweep")

_CSV_HEADER = ["suite", "cell", "SR_num", "SR_den", "TE_mean", "TE_std",
               "RE_mean", "RE_std", "TT_mean"]


@dataclass(frozen=True)
class BatchSummary:
    """Success ratio plus error statistics over the successful episodes."""

    sr_num: int
    sr_den: int
    te_mean: float | None = None
    te_std: float | None = None
    re_mean: float | None = None
    re_std: float | None = None
    tt_mean: float | None = None
    fingerprint: str | None = None


@dataclass
class CellResult:
    """One ablation cell: its config, summary, and raw episode results."""

    suite: str
    cell: str
    config: EpisodeConfig
    summary: BatchSummary
    results: list


def config_fingerprint(config: EpisodeConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def summarize(results: list, fingerprint: str | None = None) -> BatchSummary:
    """Aggregate a batch; statistics cover successful episodes only."""
    if len(results) < 1:
        raise ValueError("cannot summarize an empty batch")
    wins = [r for r in results if r.success]
    if not wins:
        return BatchSummary(0, len(results), fingerprint=fingerprint)
    # sorting makes the accumulated statistics independent of episode order
    te = np.sort([r.te_mm for r in wins])
    re = np.sort([r.re_deg for r in wins])
    tt = np.sort([float(r.steps) for r in wins])
    return BatchSummary(len(wins), len(results),
                        float(te.mean()), float(te.std()),
                        float(re.mean()), float(re.std()),
                        float(tt.mean()), fingerprint=fingerprint)


def episode_seeds(master_seed: int, index: int) -> tuple[int, int]:
    """Counter-derived (scene seed, episode seed) so cells share geometry."""
    state = np.random.SeedSequence(entropy=(int(master_seed), int(index))).generate_state(2)
    return int(state[0]), int(state[1])


def _run_one(config: EpisodeConfig, scene_seed: int) -> EpisodeResult:
    scene = generate_scene(config.scene, scene_seed)
    controller = build_controller(config)
    return run_episode(scene, controller, config)


def _thread_cap() -> int:
    cap = os.environ.get("SERVOKIT_THREADS")
    if cap is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(cap))
    except ValueError:
        return 1


def run_batch(config: EpisodeConfig, master_seed: int = 0, episodes: int = 20,
              parallel: int = 1) -> list:
    """Run a batch of episodes with counter-derived seeds, collected by index."""
    jobs = []
    for i in range(episodes):
        scene_seed, ep_seed = episode_seeds(master_seed, i)
        jobs.append((replace(config, seed=ep_seed), scene_seed))
    parallel = min(max(1, parallel), _thread_cap())
    if parallel == 1:
        return [_run_one(cfg, s) for cfg, s in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        futures = [pool.submit(_run_one, cfg, s) for cfg, s in jobs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Suite definitions

_HALF_INTRINSICS = CameraIntrinsics(fx=256.0, fy=256.0, cx=128.0, cy=128.0,
                                    width=256, height=256, patch_size=16)


def _row_entropy(row: np.ndarray) -> float:
    p = row[row > 0]
    return float(-(p * np.log(p)).sum())


def _blurred_modes_row(grid: int, centers_masses: list, sigma: float) -> np.ndarray:
    xs = np.arange(grid, dtype=float)
    ys = np.arange(grid, dtype=float)
    row = np.zeros(grid * grid)
    for (cx, cy), mass in centers_masses:
        col = np.exp(-0.5 * ((xs - cx) / sigma) ** 2)
        rw = np.exp(-0.5 * ((ys - cy) / sigma) ** 2)
        plane = np.outer(rw, col)
        row += mass * plane.ravel() / plane.sum()
    return row / row.sum()


def entropy_matched_blur(grid: int, blur: float, offset: float, mass: float) -> float:
    """Unimodal blur whose row entropy matches the bimodal model's.

    Both rows are evaluated at the grid center; the unimodal sigma is found
    by bisection (entropy grows monotonically with blur).
    """
    c = (grid - 1) / 2.0
    target = _row_entropy(_blurred_modes_row(
        grid, [((c, c), 1.0 - mass), ((c + offset, c), mass)], blur))
    lo, hi = blur, 8.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _row_entropy(_blurred_modes_row(grid, [((c, c), 1.0)], mid)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


_BIMODAL_OFFSET = 4.0
_BIMODAL_MASS = 0.5
_BIMODAL_BLUR = 0.7


def _denorm_cells(aware: bool, base: EpisodeConfig) -> list:
    # The deliberately aggressive discrete gain (lam * dt > 1) makes a 2x
    # linear-velocity overestimate cross the stability boundary instead of
    # merely converging faster, which is how scale unawareness fails here.
    cells = []
    for f in (256.0, 512.0, 768.0):
        for scale in (0.5, 1.0, 1.5):
            intr = CameraIntrinsics(fx=f, fy=f, cx=256.0, cy=256.0, width=512, height=512)
            cfg = replace(
                base,
                controller="oracle-pbvs",
                denorm_mode="aware" if aware else "unaware",
                intrinsics=intr,
                scene=replace(base.scene, scale=scale),
                gains=replace(base.gains, lam=2.2, dt=0.5),
                sampling=replace(base.sampling, rotation_error_deg=(20.0, 45.0)),
                max_steps=150,
            )
            cells.append((f"f{int(f)}_d{scale:g}", cfg))
    return cells


def _hybrid_cells(base: EpisodeConfig) -> list:
    # Wide baselines, low elevations, near-half-turn rotations, and an
    # off-center goal framing: the straight Cartesian path of the pure pose
    # law then sweeps the scene out of view mid-episode in a fraction of the
    # draws, which is the failure mode the image-space term guards against.
    shared = replace(
        base,
        intrinsics=_HALF_INTRINSICS,
        gains=replace(base.gains, lam=1.0, dt=0.05),
        sampling=replace(base.sampling,
                         rotation_error_deg=(150.0, 172.0),
                         translation_error_m=(1.2, 1.9),
                         elevation_deg=(20.0, 40.0),
                         aim_offset=0.3),
        noise=NoiseModel(blur_sigma=0.7),
        max_steps=600,
    )
    return [
        ("hybrid", replace(shared, controller="hybrid")),
        ("pure-pbvs", replace(shared, controller="epipolar-pbvs")),
    ]


def _prob_explicit_cells(base: EpisodeConfig) -> list:
    grid = _HALF_INTRINSICS.grid_width
    matched = entropy_matched_blur(grid, _BIMODAL_BLUR, _BIMODAL_OFFSET, _BIMODAL_MASS)
    shared = replace(
        base,
        controller="epipolar-pbvs",
        intrinsics=_HALF_INTRINSICS,
        gains=replace(base.gains, lam=1.0, dt=0.05),
        sampling=replace(base.sampling, rotation_error_deg=(30.0, 60.0)),
        max_steps=400,
    )
    bimodal = NoiseModel(blur_sigma=_BIMODAL_BLUR,
                         multimodal=(((_BIMODAL_OFFSET, 0.0), _BIMODAL_MASS),))
    return [
        ("bimodal", replace(shared, noise=bimodal)),
        ("unimodal", replace(shared, noise=NoiseModel(blur_sigma=matched))),
    ]


def _noise_sweep_cells(base: EpisodeConfig) -> list:
    shared = replace(
        base,
        controller="epipolar-pbvs",
        intrinsics=_HALF_INTRINSICS,
        gains=replace(base.gains, lam=1.0, dt=0.05),
        sampling=replace(base.sampling, rotation_error_deg=(30.0, 90.0)),
        max_steps=400,
    )
    cells = []
    for jitter in (0.0, 0.5, 1.0):
        for outlier in (0.0, 0.2):
            noise = NoiseModel(match_jitter_sigma=jitter, outlier_ratio=outlier,
                               blur_sigma=0.7)
            cells.append((f"j{jitter:g}_o{outlier:g}", replace(shared, noise=noise)))
    return cells


def suite_cells(suite_id: str, base: EpisodeConfig | None = None) -> list:
    """Cell name / config pairs for an ablation suite."""
    base = base or EpisodeConfig()
    if suite_id == "denorm-aware":
        return _denorm_cells(True, base)
    if suite_id == "denorm-unaware":
        return _denorm_cells(False, base)
    if suite_id == "hybrid-vs-pbvs":
        return _hybrid_cells(base)
    if suite_id == "probabilistic-vs-explicit":
        return _prob_explicit_cells(base)
    if suite_id == "noise-sweep":
        return _noise_sweep_cells(base)
    raise UnknownSuite(f"unknown suite {suite_id!r}; known: {', '.join(SUITE_IDS)}")


def run_ablation(suite_id: str, base: EpisodeConfig | None = None, master_seed: int = 0,
                 episodes: int = 20, parallel: int = 1) -> list:
    """Execute every cell of a suite with paired seeds across cells."""
    out = []
    for cell, cfg in suite_cells(suite_id, base):
        results = run_batch(cfg, master_seed=master_seed, episodes=episodes,
                            parallel=parallel)
        summary = summarize(results, fingerprint=config_fingerprint(cfg))
        out.append(CellResult(suite_id, cell, cfg, summary, results))
    return out


# ---------------------------------------------------------------------------
# CSV persistence


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and not math.isfinite(value):
        raise ValueError("cannot serialize non-finite statistics")
    return format(value, ".9g") if isinstance(value, float) else str(value)


def write_results(path, rows: list) -> None:
    """Write (suite, cell, BatchSummary) rows as CSV with the fixed header."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_HEADER)
            for suite, cell, summary in rows:
                writer.writerow([
                    suite, cell, summary.sr_num, summary.sr_den,
                    _fmt(summary.te_mean), _fmt(summary.te_std),
                    _fmt(summary.re_mean), _fmt(summary.re_std),
                    _fmt(summary.tt_mean),
                ])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_results(path) -> list:
    """Read rows written by write_results; statistics parse back to floats."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration as exc:
                raise SchemaMismatch("results file has no header") from exc
            if header != _CSV_HEADER:
                raise SchemaMismatch(f"unexpected header {header!r}")
            rows = []
            for rec in reader:
                if len(rec) != len(_CSV_HEADER):
                    raise SchemaMismatch(f"row has {len(rec)} columns")
                floats = [float(v) if v != "" else None for v in rec[4:]]
                rows.append((rec[0], rec[1],
                             BatchSummary(int(rec[2]), int(rec[3]), *floats)))
            return rows
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_metadata(path, suite_id: str, master_seed: int, episodes: int,
                   cells: list) -> None:
    """Sidecar JSON documenting conventions and per-cell config fingerprints."""
    doc = {
        "suite": suite_id,
        "master_seed": master_seed,
        "episodes": episodes,
        "conventions": {
            "std": "population (ddof=0), over successful episodes only",
            "tt_units": "controller steps, not wall-clock seconds",
            "success_thresholds": "per-cell config values; toolkit defaults, "
                                  "not externally prescribed",
        },
        "cells": {c.cell: {"fingerprint": c.summary.fingerprint,
                           "config": config_to_dict(c.config)} for c in cells},
    }
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc

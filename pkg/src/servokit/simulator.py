"""Synthetic servo environments and closed-loop episode execution.

Scenes are point clouds scattered on a rough ground plane, observed by
pinhole cameras on the upper hemisphere. Observations are built
geometrically: each current patch is matched to the patch its dominant
scene point lands on in the desired view, and the matching distribution is
synthesized around that ground truth with configurable blur, jitter,
outliers, and extra modes (from descriptor repetition or explicit offsets).
Everything is deterministic given the seeds.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .control import CANONICAL_INTRINSICS, ControlGains, clamp_twist, make_controller
from .epipolar import MatchSet
from .errors import (
    InvalidConfig,
    IoFailure,
    NoVisiblePoints,
    SamplingExhausted,
    ServoKitError,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    integrate_twist,
    normalize_pixel,
    relative_pose,
    rotation_from_rotvec,
    rotation_to_axis_angle,
)
from .matching import ScoreMatrix, expected_match

_MIN_DEPTH = 1e-9


# ---------------------------------------------------------------------------
# Scene


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for the scattered-point scene generator."""

    num_points: int = 200
    repetition: int = 1        # points sharing one descriptor id (repeated texture)
    scale: float = 1.0         # desired mean viewing depth, meters
    extent: float = 0.4        # half-width of the ground patch, relative to scale
    height_sigma: float = 0.02  # plane roughness, relative to scale

    def __post_init__(self):
        if self.num_points < 1 or self.repetition < 1:
            raise ValueError("num_points and repetition must be at least 1")
        if self.scale <= 0:
            raise ValueError("scene scale must be positive")


@dataclass(frozen=True, eq=False)
class Scene:
    """World-frame scene points with descriptor ids and the viewing scale."""

    points: np.ndarray
    descriptor_ids: np.ndarray
    scale: float
    bounds: np.ndarray  # (2, 3) min and max corners

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        ids = np.asarray(self.descriptor_ids, dtype=int).reshape(-1)
        if pts.shape[0] < 1 or ids.shape[0] != pts.shape[0]:
            raise ValueError("scene needs at least one point and one id per point")
        if self.scale <= 0:
            raise ValueError("scene scale must be positive")
        bounds = np.asarray(self.bounds, dtype=float).reshape(2, 3)
        if np.any(pts < bounds[0] - 1e-9) or np.any(pts > bounds[1] + 1e-9):
            raise ValueError("points must lie inside the bounding region")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "descriptor_ids", ids)
        object.__setattr__(self, "bounds", bounds)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Scatter points on a rough plane; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    half = config.extent * config.scale
    xy = rng.uniform(-half, half, size=(config.num_points, 2))
    z = rng.normal(0.0, config.height_sigma * config.scale, size=config.num_points)
    points = np.column_stack([xy, z])
    ids = np.arange(config.num_points) // config.repetition
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    return Scene(points, ids, config.scale, np.stack([lo, hi]))


def write_scene(path, scene: Scene) -> None:
    doc = {
        "points": scene.points.tolist(),
        "descriptor_ids": scene.descriptor_ids.tolist(),
        "scale": scene.scale,
        "bounds": {"min": scene.bounds[0].tolist(), "max": scene.bounds[1].tolist()},
    }
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_scene(path) -> Scene:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"scene file {path} is not valid JSON: {exc}") from exc
    try:
        bounds = np.stack([np.asarray(doc["bounds"]["min"], float),
                           np.asarray(doc["bounds"]["max"], float)])
        return Scene(np.asarray(doc["points"], float),
                     np.asarray(doc["descriptor_ids"], int),
                     float(doc["scale"]), bounds)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"scene file {path} is malformed: {exc}") from exc


# ---------------------------------------------------------------------------
# Pose sampling


@dataclass(frozen=True)
class SamplingConfig:
    """Initial/desired pose sampling ranges.

    Rotation errors in degrees; translation errors in meters at unit scene
    scale (multiplied by the scene scale when sampling). aim_offset decenters
    the desired view by a fraction of the scene scale, so the goal framing
    need not put the scene at the image center. Defaults follow the measured
    spread of real servo start poses.
    """

    rotation_error_deg: tuple = (30.146, 172.127)
    translation_error_m: tuple = (0.062527, 0.265812)
    elevation_deg: tuple = (35.0, 75.0)
    distance_jitter: tuple = (0.95, 1.05)
    aim_offset: float = 0.0
    min_visible_fraction: float = 0.5
    max_attempts: int = 1000


def look_at(position: np.ndarray, target: np.ndarray, roll: float = 0.0) -> Pose:
    """Camera pose at position with the optical axis through target.

    The image x axis stays horizontal before the roll is applied about the
    optical axis; a vertical view direction falls back to the world y axis
    as the horizon reference.
    """
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    rotation = np.column_stack([x, y, z])
    if roll != 0.0:
        rotation = rotation @ rotation_from_rotvec(np.array([0.0, 0.0, roll]))
    return Pose(rotation, position)


def visible_fraction(scene: Scene, world_from_camera: Pose, intr: CameraIntrinsics) -> float:
    cam = world_from_camera.inverse().transform(scene.points)
    z = cam[:, 2]
    ok = z > _MIN_DEPTH
    u = np.where(ok, intr.fx * cam[:, 0] / np.where(ok, z, 1.0) + intr.cx, -1.0)
    v = np.where(ok, intr.fy * cam[:, 1] / np.where(ok, z, 1.0) + intr.cy, -1.0)
    inside = ok & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return float(inside.mean())


def sample_pose_pair(scene: Scene, config: SamplingConfig, intr: CameraIntrinsics,
                     rng: np.random.Generator) -> tuple[Pose, Pose]:
    """Sample (initial, desired) world-from-camera poses.

    The desired pose looks at the scene centroid from the upper hemisphere at
    roughly the scene scale. The initial pose is offset by a translation drawn
    from the configured range and re-aimed at the centroid with a random roll;
    candidates are rejected until the relative rotation lands in range and
    both views keep enough of the scene visible.
    """
    rot_lo, rot_hi = (math.radians(a) for a in config.rotation_error_deg)
    trans_lo, trans_hi = (t * scene.scale for t in config.translation_error_m)
    centroid = scene.centroid
    for _ in range(config.max_attempts):
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        elevation = math.radians(rng.uniform(*config.elevation_deg))
        distance = scene.scale * rng.uniform(*config.distance_jitter)
        direction = np.array([
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ])
        aim = centroid
        if config.aim_offset > 0:
            phase = rng.uniform(0.0, 2.0 * math.pi)
            aim = centroid + config.aim_offset * scene.scale * np.array(
                [math.cos(phase), math.sin(phase), 0.0])
        desired = look_at(centroid + distance * direction, aim)
        offset = rng.normal(size=3)
        offset /= np.linalg.norm(offset)
        position = desired.translation + rng.uniform(trans_lo, trans_hi) * offset
        if position[2] < 0.05 * scene.scale:
            continue  # keep the camera above the ground plane
        roll = rng.uniform(-rot_hi, rot_hi)
        try:
            initial = look_at(position, centroid, roll=roll)
        except ValueError:
            continue
        rel = relative_pose(initial, desired)
        angle = rotation_to_axis_angle(rel.rotation).angle
        if not (rot_lo - 1e-9 <= angle <= rot_hi + 1e-9):
            continue
        if visible_fraction(scene, desired, intr) < config.min_visible_fraction:
            continue
        if visible_fraction(scene, initial, intr) < config.min_visible_fraction:
            continue
        return initial, desired
    raise SamplingExhausted(
        f"no pose pair found in {config.max_attempts} attempts for the configured ranges")


# ---------------------------------------------------------------------------
# Observation synthesis


@dataclass(frozen=True)
class NoiseModel:
    """Stress knobs for the synthesized matching distributions.

    multimodal holds (offset, mass) pairs adding extra modes at fixed patch
    offsets from the true match; descriptor repetition in the scene adds
    modes at the repeated locations automatically.
    """

    match_jitter_sigma: float = 0.0  # patch units
    outlier_ratio: float = 0.0
    multimodal: tuple = ()           # ((dx, dy), mass), ...
    blur_sigma: float = 0.0          # patch units

    def __post_init__(self):
        extra = sum(m for _, m in self.multimodal)
        if self.outlier_ratio < 0 or self.outlier_ratio + extra > 1.0 + 1e-12:
            raise ValueError("outlier ratio plus extra mode mass must stay within [0, 1]")
        if self.match_jitter_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise sigmas must be nonnegative")


@dataclass(frozen=True, eq=False)
class Observation:
    """One simulated perception packet handed to a controller."""

    intrinsics: CameraIntrinsics
    scene_scale: float
    grid_shape: tuple
    score_cd: ScoreMatrix | None = None
    score_dc: ScoreMatrix | None = None
    matches: MatchSet | None = None
    true_pose: Pose | None = None
    visible_current: np.ndarray | None = None
    visible_desired: np.ndarray | None = None
    true_match: np.ndarray | None = None  # (N, 2) desired patch coords, NaN when unseen


def _project_all(scene: Scene, pose: Pose, intr: CameraIntrinsics):
    cam = pose.inverse().transform(scene.points)
    z = cam[:, 2]
    ok = z > _MIN_DEPTH
    safe_z = np.where(ok, z, 1.0)
    u = intr.fx * cam[:, 0] / safe_z + intr.cx
    v = intr.fy * cam[:, 1] / safe_z + intr.cy
    inside = ok & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return u, v, z, inside


def _dominant_points(u, v, depth, inside, intr: CameraIntrinsics) -> dict:
    """Pick one representative point per occupied patch.

    Representative is the point nearest the patch center; exact distance ties
    fall to the nearer (then lower-index) point, which z-buffers coincident
    projections deterministically.
    """
    ps = intr.patch_size
    best: dict[int, tuple] = {}
    for idx in np.flatnonzero(inside):
        px = int(u[idx] // ps)
        py = int(v[idx] // ps)
        flat = py * intr.grid_width + px
        cx = (px + 0.5) * ps
        cy = (py + 0.5) * ps
        key = (math.hypot(u[idx] - cx, v[idx] - cy), depth[idx], idx)
        if flat not in best or key < best[flat]:
            best[flat] = key
    return {flat: key[2] for flat, key in best.items()}


def _direction_scores(scene: Scene, pose_a: Pose, pose_b: Pose, intr: CameraIntrinsics,
                      noise: NoiseModel, rng: np.random.Generator):
    """Score rows from view a to view b plus visibility and ground-truth matches.

    Each visible patch gets a list of modes (true location, repeated-texture
    locations sharing the primary mass, configured extra modes); the mode
    profiles are separable Gaussians evaluated over the whole grid in one
    vectorized pass, then summed and renormalized per row. Patches without a
    visible point keep uniform rows.
    """
    gw, gh = intr.grid_width, intr.grid_height
    n = gw * gh
    ua, va, za, ina = _project_all(scene, pose_a, intr)
    ub, vb, _, inb = _project_all(scene, pose_b, intr)
    dominant = _dominant_points(ua, va, za, ina, intr)
    # continuous patch coordinates in view b for every point (NaN when unseen)
    coord_b = np.full((scene.points.shape[0], 2), np.nan)
    coord_b[inb, 0] = ub[inb] / intr.patch_size - 0.5
    coord_b[inb, 1] = vb[inb] / intr.patch_size - 0.5
    # continuous view-a position of each patch's dominant point; explicit
    # matches carry this sub-patch coordinate like a dense matcher would
    anchor_a = np.full((n, 2), np.nan)
    repeated = scene.descriptor_ids.shape[0] != np.unique(scene.descriptor_ids).shape[0]
    by_id: dict[int, list] = {}
    if repeated:
        for idx in np.flatnonzero(inb):
            by_id.setdefault(int(scene.descriptor_ids[idx]), []).append(idx)
    extra_mass = sum(m for _, m in noise.multimodal)
    rows = np.full((n, n), 1.0 / n)
    visible = np.zeros(n, dtype=bool)
    true_match = np.full((n, 2), np.nan)
    pairs = [(flat, point) for flat, point in sorted(dominant.items()) if inb[point]]
    if not pairs:
        return rows, visible, true_match, anchor_a
    out_draws = rng.random(len(pairs)) if noise.outlier_ratio > 0 else np.zeros(len(pairs))
    mode_row: list[int] = []
    mode_center: list[np.ndarray] = []
    mode_mass: list[float] = []
    for k, (flat, point) in enumerate(pairs):
        true_loc = coord_b[point]
        true_match[flat] = true_loc
        visible[flat] = True
        anchor_a[flat] = (ua[point] / intr.patch_size - 0.5,
                          va[point] / intr.patch_size - 0.5)
        if noise.outlier_ratio > 0 and out_draws[k] < noise.outlier_ratio:
            loc = np.array([rng.uniform(0, gw - 1), rng.uniform(0, gh - 1)])
            mode_row.append(flat)
            mode_center.append(loc)
            mode_mass.append(1.0)
            continue
        locations = [true_loc]
        if repeated:
            for other in by_id.get(int(scene.descriptor_ids[point]), []):
                if other != point:
                    locations.append(coord_b[other])
        share = (1.0 - extra_mass) / len(locations)
        for loc in locations:
            mode_row.append(flat)
            mode_center.append(loc)
            mode_mass.append(share)
        for offset, mass in noise.multimodal:
            loc = true_loc + np.asarray(offset, dtype=float)
            if -0.5 <= loc[0] <= gw - 0.5 and -0.5 <= loc[1] <= gh - 0.5:
                mode_row.append(flat)
                mode_center.append(loc)
                mode_mass.append(mass)
    centers = np.asarray(mode_center)
    masses = np.asarray(mode_mass)
    row_idx = np.asarray(mode_row)
    if noise.match_jitter_sigma > 0:
        centers = centers + rng.normal(0.0, noise.match_jitter_sigma, size=centers.shape)
    acc = np.zeros((n, n))
    if noise.blur_sigma > 0:
        xs = np.arange(gw, dtype=float)
        ys = np.arange(gh, dtype=float)
        colw = np.exp(-0.5 * ((xs[None, :] - centers[:, 0:1]) / noise.blur_sigma) ** 2)
        roww = np.exp(-0.5 * ((ys[None, :] - centers[:, 1:2]) / noise.blur_sigma) ** 2)
        planes = (roww[:, :, None] * colw[:, None, :]).reshape(len(masses), n)
        totals = planes.sum(axis=1, keepdims=True)
        totals[totals <= 0] = 1.0
        np.add.at(acc, row_idx, masses[:, None] * planes / totals)
    else:
        ix = np.clip(np.rint(centers[:, 0]), 0, gw - 1).astype(int)
        iy = np.clip(np.rint(centers[:, 1]), 0, gh - 1).astype(int)
        np.add.at(acc, (row_idx, iy * gw + ix), masses)
    vis_flats = np.flatnonzero(visible)
    totals = acc[vis_flats].sum(axis=1)
    good = totals > 0
    rows[vis_flats[good]] = acc[vis_flats[good]] / totals[good, None]
    return rows, visible, true_match, anchor_a


def observe(scene: Scene, world_from_current: Pose, world_from_desired: Pose,
            intr: CameraIntrinsics, noise: NoiseModel, rng: np.random.Generator,
            channels: frozenset = frozenset({"pose", "matches", "scores"})) -> Observation:
    """Synthesize the perception channels a controller asked for.

    "pose" exposes the ground-truth relative pose, "matches" the explicit
    correspondences reduced from the forward score matrix, and "scores" both
    matching distributions. Raises when perception is requested but one of
    the views sees nothing.
    """
    grid = (intr.grid_height, intr.grid_width)
    true_pose = relative_pose(world_from_current, world_from_desired) if "pose" in channels else None
    need_scores = "scores" in channels
    need_matches = "matches" in channels or need_scores
    if not need_matches:
        return Observation(intr, scene.scale, grid, true_pose=true_pose)
    rows_cd, vis_c, true_match, anchors_c = _direction_scores(
        scene, world_from_current, world_from_desired, intr, noise, rng)
    score_cd = ScoreMatrix(rows_cd, grid, grid)
    score_dc = None
    vis_d = None
    if need_scores:
        rows_dc, vis_d, _, _ = _direction_scores(
            scene, world_from_desired, world_from_current, intr, noise, rng)
        score_dc = ScoreMatrix(rows_dc, grid, grid)
    else:
        # occupancy of the desired view without building its score rows
        ud, vdd, _, ind = _project_all(scene, world_from_desired, intr)
        vis_d = np.zeros(grid[0] * grid[1], dtype=bool)
        for idx in np.flatnonzero(ind):
            px = int(ud[idx] // intr.patch_size)
            py = int(vdd[idx] // intr.patch_size)
            vis_d[py * intr.grid_width + px] = True
    if not vis_c.any() or not vis_d.any():
        raise NoVisiblePoints("a view observes no scene points")
    reduced = expected_match(score_cd)
    src = anchors_c[vis_c]
    dst = reduced.matched[vis_c]
    # rows whose mass sits against the grid border reduce with a truncation
    # bias, so they are masked out of the explicit matches (border masking);
    # wider blur pushes the bias deeper into the grid
    margin = 1.5 + 1.5 * noise.blur_sigma
    gh, gw = grid
    interior = ((dst[:, 0] >= margin) & (dst[:, 0] <= gw - 1 - margin)
                & (dst[:, 1] >= margin) & (dst[:, 1] <= gh - 1 - margin))
    src = src[interior]
    dst = dst[interior]
    ps = intr.patch_size
    cur_px = (src + 0.5) * ps
    des_px = (dst + 0.5) * ps
    matches = MatchSet(normalize_pixel(cur_px, intr), normalize_pixel(des_px, intr))
    return Observation(intr, scene.scale, grid, score_cd=score_cd, score_dc=score_dc,
                       matches=matches, true_pose=true_pose, visible_current=vis_c,
                       visible_desired=vis_d, true_match=true_match)


# ---------------------------------------------------------------------------
# Episode configuration and execution


@dataclass(frozen=True)
class EpisodeConfig:
    """Everything one servo episode needs, serializable to JSON."""

    seed: int = 0
    max_steps: int = 600
    gains: ControlGains = ControlGains()
    controller: str = "oracle-pbvs"
    denorm_mode: str = "off"
    hybrid_pose_source: str = "epipolar"
    intrinsics: CameraIntrinsics = CANONICAL_INTRINSICS
    scene: SceneConfig = SceneConfig()
    sampling: SamplingConfig = SamplingConfig()
    noise: NoiseModel = NoiseModel()
    te_threshold_mm: float = 5.0
    re_threshold_deg: float = 1.0
    max_linear: float = 0.5
    max_angular: float = 1.0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.te_threshold_mm <= 0 or self.re_threshold_deg <= 0:
            raise ValueError("convergence thresholds must be positive")


def config_to_dict(config: EpisodeConfig) -> dict:
    return {
        "seed": config.seed,
        "max_steps": config.max_steps,
        "gains": {"lam": config.gains.lam, "dt": config.gains.dt,
                  "switch_threshold_factor": config.gains.switch_threshold_factor},
        "controller": config.controller,
        "denorm_mode": config.denorm_mode,
        "hybrid_pose_source": config.hybrid_pose_source,
        "intrinsics": {"fx": config.intrinsics.fx, "fy": config.intrinsics.fy,
                       "cx": config.intrinsics.cx, "cy": config.intrinsics.cy,
                       "width": config.intrinsics.width, "height": config.intrinsics.height,
                       "patch_size": config.intrinsics.patch_size},
        "scene": {"num_points": config.scene.num_points, "repetition": config.scene.repetition,
                  "scale": config.scene.scale, "extent": config.scene.extent,
                  "height_sigma": config.scene.height_sigma},
        "sampling": {"rotation_error_deg": list(config.sampling.rotation_error_deg),
                     "translation_error_m": list(config.sampling.translation_error_m),
                     "elevation_deg": list(config.sampling.elevation_deg),
                     "distance_jitter": list(config.sampling.distance_jitter),
                     "aim_offset": config.sampling.aim_offset,
                     "min_visible_fraction": config.sampling.min_visible_fraction,
                     "max_attempts": config.sampling.max_attempts},
        "noise": {"match_jitter_sigma": config.noise.match_jitter_sigma,
                  "outlier_ratio": config.noise.outlier_ratio,
                  "multimodal": [[list(off), mass] for off, mass in config.noise.multimodal],
                  "blur_sigma": config.noise.blur_sigma},
        "te_threshold_mm": config.te_threshold_mm,
        "re_threshold_deg": config.re_threshold_deg,
        "max_linear": config.max_linear,
        "max_angular": config.max_angular,
        "divergence_factor": config.divergence_factor,
    }


def _pick(doc: dict, defaults, names: tuple, builder, label: str):
    unknown = set(doc) - set(names)
    if unknown:
        raise InvalidConfig(f"unknown {label} fields: {sorted(unknown)}")
    kwargs = {}
    for name in names:
        if name in doc:
            kwargs[name] = doc[name]
    try:
        return builder(defaults, kwargs)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"bad {label} section: {exc}") from exc


def config_from_dict(doc: dict) -> EpisodeConfig:
    base = EpisodeConfig()
    top = {"seed", "max_steps", "gains", "controller", "denorm_mode", "hybrid_pose_source",
           "intrinsics", "scene", "sampling", "noise", "te_threshold_mm", "re_threshold_deg",
           "max_linear", "max_angular", "divergence_factor"}
    unknown = set(doc) - top
    if unknown:
        raise InvalidConfig(f"unknown config fields: {sorted(unknown)}")
    gains = _pick(doc.get("gains", {}), base.gains,
                  ("lam", "dt", "switch_threshold_factor"),
                  lambda d, kw: replace(d, **kw), "gains")
    intr = _pick(doc.get("intrinsics", {}), base.intrinsics,
                 ("fx", "fy", "cx", "cy", "width", "height", "patch_size"),
                 lambda d, kw: replace(d, **kw), "intrinsics")
    scene = _pick(doc.get("scene", {}), base.scene,
                  ("num_points", "repetition", "scale", "extent", "height_sigma"),
                  lambda d, kw: replace(d, **kw), "scene")

    def build_sampling(d, kw):
        for key in ("rotation_error_deg", "translation_error_m", "elevation_deg", "distance_jitter"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return replace(d, **kw)

    sampling = _pick(doc.get("sampling", {}), base.sampling,
                     ("rotation_error_deg", "translation_error_m", "elevation_deg",
                      "distance_jitter", "aim_offset", "min_visible_fraction",
                      "max_attempts"),
                     build_sampling, "sampling")

    def build_noise(d, kw):
        if "multimodal" in kw:
            kw["multimodal"] = tuple((tuple(off), float(mass)) for off, mass in kw["multimodal"])
        return replace(d, **kw)

    noise = _pick(doc.get("noise", {}), base.noise,
                  ("match_jitter_sigma", "outlier_ratio", "multimodal", "blur_sigma"),
                  build_noise, "noise")
    simple = {k: doc[k] for k in
              ("seed", "max_steps", "controller", "denorm_mode", "hybrid_pose_source",
               "te_threshold_mm", "re_threshold_deg", "max_linear", "max_angular",
               "divergence_factor") if k in doc}
    try:
        return replace(base, gains=gains, intrinsics=intr, scene=scene,
                       sampling=sampling, noise=noise, **simple)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"bad config: {exc}") from exc


def read_config(path) -> EpisodeConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


@dataclass
class StepRecord:
    """One line of an episode trajectory."""

    step: int
    rotation: list
    translation: list
    twist: list
    te_mm: float
    re_deg: float
    mode: str
    clamped: bool
    xg_c: list | None = None
    xg_d: list | None = None

    def to_json_dict(self) -> dict:
        doc = {"step": self.step,
               "pose": {"rotation": self.rotation, "translation": self.translation},
               "twist": self.twist, "te_mm": self.te_mm, "re_deg": self.re_deg,
               "mode": self.mode, "clamped": self.clamped}
        if self.xg_c is not None:
            doc["xg_c"] = self.xg_c
            doc["xg_d"] = self.xg_d
        return doc


@dataclass
class EpisodeResult:
    """Outcome of one servo episode."""

    success: bool
    te_mm: float
    re_deg: float
    steps: int
    diverged: bool = False
    failure_reason: str | None = None
    mode_switch_step: int | None = None
    initial_te_mm: float = 0.0
    initial_re_deg: float = 0.0
    trajectory: list = field(default_factory=list)


def _pose_errors(rel: Pose) -> tuple[float, float]:
    te = float(np.linalg.norm(rel.translation)) * 1000.0
    re = math.degrees(rotation_to_axis_angle(rel.rotation).angle)
    return te, re


def run_episode(scene: Scene, controller, config: EpisodeConfig,
                initial: Pose | None = None, desired: Pose | None = None) -> EpisodeResult:
    """Run one closed-loop servo episode.

    Poses are sampled from the config seed unless given explicitly. The loop
    observes, asks the controller for a twist, clamps it, and integrates the
    camera, until both error thresholds are met, the error diverges, or the
    step budget runs out. Controller and perception failures become a failed
    result instead of an exception so batches keep going.
    """
    rng = np.random.default_rng(config.seed)
    if initial is None or desired is None:
        initial, desired = sample_pose_pair(scene, config.sampling, config.intrinsics, rng)
    controller.reset()
    channels = controller.requires
    pose = initial
    records: list[StepRecord] = []
    te0 = re0 = None
    te = re = 0.0
    success = False
    diverged = False
    failure = None
    mode_switch = None
    last_mode = None
    step = 0
    for step in range(config.max_steps + 1):
        rel = relative_pose(pose, desired)
        te, re = _pose_errors(rel)
        if te0 is None:
            te0, re0 = te, re
        if te < config.te_threshold_mm and re < config.re_threshold_deg:
            success = True
            records.append(_terminal_record(step, pose, te, re, "success"))
            break
        if (te > config.divergence_factor * max(te0, config.te_threshold_mm)
                or re > config.divergence_factor * max(re0, config.re_threshold_deg)):
            diverged = True
            records.append(_terminal_record(step, pose, te, re, "diverged"))
            break
        if step == config.max_steps:
            records.append(_terminal_record(step, pose, te, re, "timeout"))
            break
        try:
            obs = observe(scene, pose, desired, config.intrinsics, config.noise, rng,
                          channels=channels)
            twist, info = controller.step(obs)
        except ServoKitError as exc:
            failure = f"{type(exc).__name__}: {exc}"
            records.append(_terminal_record(step, pose, te, re, "error"))
            break
        twist, clamped = clamp_twist(twist, config.max_linear, config.max_angular)
        mode = info.get("mode", "pbvs")
        if last_mode == "hybrid" and mode == "pbvs" and mode_switch is None:
            mode_switch = step
        last_mode = mode
        records.append(StepRecord(step, pose.rotation.tolist(), pose.translation.tolist(),
                                  twist.as_vector().tolist(), te, re, mode, clamped,
                                  info.get("xg_c"), info.get("xg_d")))
        pose = integrate_twist(pose, twist, config.gains.dt)
    return EpisodeResult(success=success, te_mm=te, re_deg=re, steps=step,
                         diverged=diverged, failure_reason=failure,
                         mode_switch_step=mode_switch, initial_te_mm=te0 or 0.0,
                         initial_re_deg=re0 or 0.0, trajectory=records)


def _terminal_record(step: int, pose: Pose, te: float, re: float, status: str) -> StepRecord:
    return StepRecord(step, pose.rotation.tolist(), pose.translation.tolist(),
                      [0.0] * 6, te, re, status, False)


def build_controller(config: EpisodeConfig):
    """Controller instance for an episode config (fresh state per episode)."""
    return make_controller(config.controller, config.gains, config.intrinsics,
                           config.scene.scale, denorm_mode=config.denorm_mode,
                           hybrid_pose_source=config.hybrid_pose_source)

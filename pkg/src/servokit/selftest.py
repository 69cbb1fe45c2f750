"""Standalone invariant checks behind the `verify` CLI subcommand.

Each check raises AssertionError with a short message when its property
fails; the runner counts passes and failures. The particle-transfer
reference here is an independent per-anchor gather kept deliberately naive
so it can arbitrate the production scatter implementation.
"""

import numpy as np

from . import bench, control, epipolar, geometry, matching, simulator


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, np.pi - 1e-3)
    return geometry.rotation_from_rotvec(axis * angle)


def p2g_reference(score: matching.ScoreMatrix, anchors_per_axis: int) -> np.ndarray:
    """Direct per-anchor gather over every particle of every row."""
    h, w = score.source_shape
    k = anchors_per_axis
    gx, gy = 2.0 * w / k, 2.0 * h / k
    ax = np.linspace(-w, w, k)
    ay = np.linspace(-h, h, k)
    coords = matching.grid_coords(h, w)
    out = np.zeros((h, w, k * k))
    for i in range(h * w):
        disp = coords - coords[i]
        for jy in range(k):
            for jx in range(k):
                num = den = 0.0
                for p in range(h * w):
                    ox = (disp[p, 0] - ax[jx]) / gx
                    oy = (disp[p, 1] - ay[jy]) / gy
                    if abs(ox) < 1.5 and abs(oy) < 1.5:
                        wgt = float(matching.quadratic_bspline(ox) * matching.quadratic_bspline(oy))
                        num += score.values[i, p] * wgt
                        den += wgt
                if den > 1e-12:
                    out[i // w, i % w, jy * k + jx] = num / den
    return out


def shifted_delta_scores(h: int, w: int, shift: tuple) -> tuple[matching.ScoreMatrix, matching.ScoreMatrix]:
    """A compact two-delta match field and the same field with both patch sets shifted.

    Rows outside the shifted support stay uniform; on the overlap the shifted
    matrix is an exact index remap of the base one, which makes the transfer
    equivariance exact rather than approximate.
    """
    dx, dy = shift
    n = h * w
    base = np.full((n, n), 1.0 / n)
    moved = np.full((n, n), 1.0 / n)
    for y in range(1, h - 1 - dy):
        for x in range(1, w - 1 - dx):
            i = y * w + x
            ta = (y + 1) * w + (x + 1)
            tb = y * w + (x - 1)
            row = np.zeros(n)
            row[ta] = 0.7
            row[tb] = 0.3
            base[i] = row
            shifted_row = np.zeros(n)
            shifted_row[ta + dy * w + dx] = 0.7
            shifted_row[tb + dy * w + dx] = 0.3
            moved[i + dy * w + dx] = shifted_row
    grid = (h, w)
    return (matching.ScoreMatrix(base, grid, grid),
            matching.ScoreMatrix(moved, grid, grid))


def _synthetic_matches(rng: np.random.Generator, n: int = 24):
    # Valid two-view geometry: every point must stay in front of both cameras
    for _ in range(200):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rotation = geometry.rotation_from_rotvec(axis * rng.uniform(0.05, 1.0))
        t = rng.normal(size=3)
        t *= rng.uniform(0.3, 0.8) / np.linalg.norm(t)
        points = rng.uniform(-1.0, 1.0, size=(n, 3)) + np.array([0.0, 0.0, 4.0])
        des_pts = points @ rotation.T + t
        if des_pts[:, 2].min() <= 0.5:
            continue
        cur = points / points[:, 2:3]
        des = des_pts / des_pts[:, 2:3]
        cur[:, 2] = 1.0
        des[:, 2] = 1.0
        return epipolar.MatchSet(cur, des), rotation, t
    raise AssertionError("could not draw a valid synthetic two-view scene")


def check_pose_algebra():
    rng = np.random.default_rng(11)
    for _ in range(50):
        a = geometry.Pose(random_rotation(rng), rng.normal(size=3))
        b = geometry.Pose(random_rotation(rng), rng.normal(size=3))
        c = geometry.Pose(random_rotation(rng), rng.normal(size=3))
        ab_c = a.compose(b).compose(c)
        a_bc = a.compose(b.compose(c))
        assert np.allclose(ab_c.rotation, a_bc.rotation, atol=1e-12), "composition not associative"
        assert np.allclose(ab_c.translation, a_bc.translation, atol=1e-12)
        ident = a.inverse().compose(a)
        assert np.linalg.norm(ident.rotation - np.eye(3)) < 1e-12, "inverse broken"
        assert np.linalg.norm(ident.translation) < 1e-12


def check_projection_roundtrip():
    rng = np.random.default_rng(12)
    intr = control.CANONICAL_INTRINSICS
    for _ in range(100):
        p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.2, 5.0)])
        px = geometry.project(p, intr)
        ray = geometry.normalize_pixel(px, intr)
        assert np.allclose(ray, p / p[2], atol=1e-12), "projection roundtrip failed"


def check_axis_angle_roundtrip():
    rng = np.random.default_rng(13)
    for _ in range(200):
        r = random_rotation(rng)
        back = geometry.axis_angle_to_rotation(geometry.rotation_to_axis_angle(r))
        assert np.linalg.norm(r - back) < 1e-9, "axis-angle roundtrip failed"


def check_twist_reversibility():
    rng = np.random.default_rng(14)
    for _ in range(50):
        pose = geometry.Pose(random_rotation(rng), rng.normal(size=3))
        twist = geometry.Twist(rng.normal(size=3), rng.normal(size=3))
        back = geometry.integrate_twist(
            geometry.integrate_twist(pose, twist, 0.1),
            geometry.Twist(-twist.linear, -twist.angular), 0.1)
        assert np.linalg.norm(back.rotation - pose.rotation) < 1e-8, "twist not reversible"
        assert np.linalg.norm(back.translation - pose.translation) < 1e-8


def check_epipolar_exactness():
    rng = np.random.default_rng(15)
    for _ in range(20):
        matches, rotation, t = _synthetic_matches(rng)
        pose, fraction = epipolar.pose_from_matches(matches)
        rot_err = geometry.rotation_to_axis_angle(pose.rotation.T @ rotation).angle
        dir_err = np.arccos(np.clip(pose.translation @ (t / np.linalg.norm(t)), -1.0, 1.0))
        assert rot_err < 1e-7, "recovered rotation off"
        assert dir_err < 1e-7, "recovered translation direction off"
        assert fraction == 1.0, "exact scene should have full positive depth"


def check_kernel_partition():
    rng = np.random.default_rng(16)
    g = 2.0
    anchors = np.arange(-20, 21, dtype=float) * g
    offsets = rng.uniform(-10.0, 10.0, size=2000)
    for f in offsets:
        weights = matching.quadratic_bspline((f - anchors) / g)
        assert abs(weights.sum() - 1.0) < 1e-12, "kernel partition of unity failed"


def check_p2g_equivariance():
    # Equality is exact only where the kernel windows of the mass-carrying
    # anchors stay inside the displacement range of both rows; with a 16-patch
    # grid, 32 anchors per axis, and modes within one patch of the diagonal
    # that interior band is x, y in [4, 10].
    base, moved = shifted_delta_scores(16, 16, (1, 1))
    p0 = matching.particles_to_grid(base, 32).values
    p1 = matching.particles_to_grid(moved, 32).values
    interior = p0[4:11, 4:11, :]
    shifted = p1[5:12, 5:12, :]
    assert np.max(np.abs(interior - shifted)) < 1e-12, "transfer not shift equivariant"


def check_p2g_matches_reference():
    rng = np.random.default_rng(17)
    h = w = 6
    raw = rng.uniform(0.0, 1.0, size=(h * w, h * w))
    raw /= raw.sum(axis=1, keepdims=True)
    score = matching.ScoreMatrix(raw, (h, w), (h, w))
    fast = matching.particles_to_grid(score, 5).values
    slow = p2g_reference(score, 5)
    assert np.max(np.abs(fast - slow)) < 1e-12, "scatter disagrees with gather"


def check_pbvs_inverse():
    rng = np.random.default_rng(18)
    for _ in range(100):
        pose = geometry.Pose(random_rotation(rng), rng.normal(size=3))
        lam = rng.uniform(0.2, 3.0)
        back = control.inverse_pbvs(control.pbvs(pose, lam), lam)
        assert np.linalg.norm(back.rotation - pose.rotation) < 1e-10
        assert np.linalg.norm(back.translation - pose.translation) < 1e-10


def check_sigma_roundtrip():
    for x in np.linspace(-10.0, 10.0, 2001):
        assert abs(control.sigma_inv(control.sigma(x)) - x) < 1e-12, "sigma roundtrip failed"


def check_denormalization_laws():
    rng = np.random.default_rng(19)
    intr = control.CANONICAL_INTRINSICS
    for _ in range(50):
        pose = geometry.Pose(random_rotation(rng), rng.normal(size=3))
        twist = control.pbvs(pose, 1.0)
        same = control.denormalize_velocity(
            twist, control.DenormParams(intr, 1.0), 1.0)
        assert np.linalg.norm(same.as_vector() - twist.as_vector()) < 1e-9
        doubled = control.denormalize_velocity(
            twist, control.DenormParams(intr, 2.0), 1.0)
        assert np.max(np.abs(doubled.linear - 2.0 * twist.linear)) < 1e-12
        assert np.max(np.abs(doubled.angular - twist.angular)) < 1e-12


def check_mode_threshold_scaling():
    a = np.array([0.0, 0.0])
    b = np.array([3.0, 0.0])
    small = control.select_mode(a, b, 256)
    large = control.select_mode(a, b, 1024)
    assert small is control.ControlMode.HYBRID
    assert large is control.ControlMode.PBVS, "threshold should double with 4x patches"


def check_gain_scaling():
    rng = np.random.default_rng(20)
    pose = geometry.Pose(random_rotation(rng), rng.normal(size=3))
    one = control.pbvs(pose, 1.0).as_vector()
    three = control.pbvs(pose, 3.0).as_vector()
    assert np.allclose(three, 3.0 * one, atol=1e-12), "pbvs not linear in the gain"
    xg_c = np.array([14.0, 16.0])
    xg_d = np.array([17.0, 15.0])
    h1 = control.hybrid_control(pose, xg_c, xg_d, 1.0, 1.0).as_vector()
    h3 = control.hybrid_control(pose, xg_c, xg_d, 1.0, 3.0).as_vector()
    assert np.allclose(h3, 3.0 * h1, atol=1e-10), "hybrid law not linear in the gain"


def check_episode_determinism():
    config = simulator.EpisodeConfig(seed=5, max_steps=40)
    scene = simulator.generate_scene(config.scene, 7)
    runs = []
    for _ in range(2):
        controller = simulator.build_controller(config)
        runs.append(simulator.run_episode(scene, controller, config))
    a, b = runs
    assert a.steps == b.steps and a.success == b.success
    assert a.te_mm == b.te_mm and a.re_deg == b.re_deg, "episodes not deterministic"
    for ra, rb in zip(a.trajectory, b.trajectory):
        assert ra.to_json_dict() == rb.to_json_dict(), "trajectories differ"


def check_summary_permutation_invariance():
    results = [simulator.EpisodeResult(success=True, te_mm=float(i), re_deg=0.1 * i, steps=i)
               for i in range(1, 6)]
    fwd = bench.summarize(results)
    rev = bench.summarize(list(reversed(results)))
    assert fwd == rev, "summary depends on episode order"


ALL_CHECKS = [
    ("pose-algebra", check_pose_algebra),
    ("projection-roundtrip", check_projection_roundtrip),
    ("axis-angle-roundtrip", check_axis_angle_roundtrip),
    ("twist-reversibility", check_twist_reversibility),
    ("epipolar-exactness", check_epipolar_exactness),
    ("kernel-partition-of-unity", check_kernel_partition),
    ("p2g-equivariance", check_p2g_equivariance),
    ("p2g-scatter-vs-gather", check_p2g_matches_reference),
    ("pbvs-inverse-roundtrip", check_pbvs_inverse),
    ("sigma-roundtrip", check_sigma_roundtrip),
    ("denormalization-laws", check_denormalization_laws),
    ("mode-threshold-scaling", check_mode_threshold_scaling),
    ("gain-scaling", check_gain_scaling),
    ("episode-determinism", check_episode_determinism),
    ("summary-permutation-invariance", check_summary_permutation_invariance),
]


def run_all(out=print) -> tuple[int, int]:
    """Run every check; returns (passed, failed)."""
    passed = failed = 0
    for name, fn in ALL_CHECKS:
        try:
            fn()
        except Exception as exc:  # report and keep going
            failed += 1
            out(f"FAIL {name}: {exc}")
        else:
            passed += 1
            out(f"PASS {name}")
    out(f"{passed} passed, {failed} failed")
    return passed, failed

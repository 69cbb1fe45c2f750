"""Shared helpers for the test suite."""

import numpy as np

from servokit.epipolar import MatchSet
from servokit.geometry import Pose, rotation_from_rotvec


def random_rotation(rng, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rotation_from_rotvec(axis * rng.uniform(0.0, max_angle))


def random_pose(rng, max_angle=np.pi - 1e-3, trans_scale=1.0):
    return Pose(random_rotation(rng, max_angle), trans_scale * rng.normal(size=3))


def synthetic_two_view(rng, n=30, max_angle=1.0, max_baseline=0.8, depth=4.0):
    """Exact correspondences from a valid two-view scene.

    Returns (matches, rotation, translation) with every point in front of
    both cameras; rotation/translation map current-frame points into the
    desired frame.
    """
    for _ in range(500):
        rotation = random_rotation(rng, max_angle)
        t = rng.normal(size=3)
        t *= rng.uniform(0.3, max_baseline) / np.linalg.norm(t)
        points = rng.uniform(-1.0, 1.0, size=(n, 3)) + np.array([0.0, 0.0, depth])
        des_pts = points @ rotation.T + t
        if des_pts[:, 2].min() <= 0.5:
            continue
        cur = points / points[:, 2:3]
        des = des_pts / des_pts[:, 2:3]
        cur[:, 2] = 1.0
        des[:, 2] = 1.0
        return MatchSet(cur, des), rotation, t
    raise RuntimeError("failed to draw a valid two-view configuration")


def rotations_allclose(a, b, atol=1e-9):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) < atol

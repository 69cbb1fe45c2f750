"""Essential-matrix estimation and relative pose recovery from correspondences.

Points are expressed on the normalized camera plane (third component exactly
one). The estimator is the normalized eight-point algorithm; pose recovery
enumerates the four decomposition hypotheses and keeps the one with the most
triangulated points in front of both cameras.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfiguration,
    IllConditioned,
    InsufficientMatches,
    NoValidCandidate,
    RankDeficient,
)
from .geometry import Pose, hat, vee

# Rotation by +pi/2 about the z axis, the fixed factor of the decomposition
_RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

_MIN_MATCHES = 8


@dataclass(frozen=True, eq=False)
class MatchSet:
    """Paired normalized-plane points, current view first, optional weights in [0, 1]."""

    current: np.ndarray
    desired: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        cur = np.asarray(self.current, dtype=float).reshape(-1, 3)
        des = np.asarray(self.desired, dtype=float).reshape(-1, 3)
        if cur.shape != des.shape:
            raise ValueError("current and desired point arrays must have equal shapes")
        if not (np.all(cur[:, 2] == 1.0) and np.all(des[:, 2] == 1.0)):
            raise ValueError("normalized points must have third component exactly 1")
        object.__setattr__(self, "current", cur)
        object.__setattr__(self, "desired", des)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if w.shape[0] != cur.shape[0]:
                raise ValueError("one weight per match required")
            if np.any(w < 0) or np.any(w > 1):
                raise ValueError("weights must lie in [0, 1]")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.current.shape[0]


@dataclass(frozen=True, eq=False)
class PoseCandidates:
    """The four (rotation, translation) hypotheses of an essential decomposition."""

    hypotheses: tuple

    def __post_init__(self):
        if len(self.hypotheses) != 4:
            raise ValueError("expected exactly four hypotheses")


def _hartley_normalization(points: np.ndarray) -> np.ndarray:
    # Similarity transform bringing the centroid to the origin and the mean
    # distance from it to sqrt(2); conditions the linear system.
    xy = points[:, :2]
    mean = xy.mean(axis=0)
    dist = np.linalg.norm(xy - mean, axis=1).mean()
    scale = np.sqrt(2.0) / dist if dist > 0 else 1.0
    return np.array([
        [scale, 0.0, -scale * mean[0]],
        [0.0, scale, -scale * mean[1]],
        [0.0, 0.0, 1.0],
    ])


def project_to_essential(e: np.ndarray) -> np.ndarray:
    """Nearest matrix (Frobenius) with singular values (s, s, 0)."""
    u, s, vt = np.linalg.svd(np.asarray(e, dtype=float))
    if np.linalg.det(u) < 0:
        u = u.copy()
        u[:, 2] *= -1.0
    if np.linalg.det(vt) < 0:
        vt = vt.copy()
        vt[2, :] *= -1.0
    mean = 0.5 * (s[0] + s[1])
    return u @ np.diag([mean, mean, 0.0]) @ vt


def epipolar_residuals(essential: np.ndarray, matches: MatchSet) -> np.ndarray:
    """Algebraic epipolar residual per match: desired^T E current."""
    return np.einsum("ni,ij,nj->n", matches.desired, essential, matches.current)


def estimate_essential(matches: MatchSet, hartley: bool = True) -> np.ndarray:
    """Estimate the essential matrix with the normalized eight-point algorithm.

    The constraint matrix is built from the Kronecker rows of each pair, its
    least-squares null vector gives the raw matrix, and the result is
    projected onto the essential manifold. Optional per-match weights scale
    the constraint rows by their square roots.
    """
    n = len(matches)
    if n < _MIN_MATCHES:
        raise InsufficientMatches(f"need at least {_MIN_MATCHES} matches, got {n}")
    if hartley:
        t_cur = _hartley_normalization(matches.current)
        t_des = _hartley_normalization(matches.desired)
        cur = matches.current @ t_cur.T
        des = matches.desired @ t_des.T
    else:
        t_cur = t_des = np.eye(3)
        cur = matches.current
        des = matches.desired
    a = np.einsum("ni,nj->nij", des, cur).reshape(n, 9)
    if matches.weights is not None:
        a = a * np.sqrt(matches.weights)[:, None]
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    sv = np.zeros(9)
    sv[: s.shape[0]] = s
    if abs(sv[7] - sv[8]) < 1e-12:
        raise DegenerateConfiguration(
            "constraint matrix has a degenerate null space; matches do not "
            "determine a unique essential matrix")
    raw = vt[-1].reshape(3, 3)
    essential = t_des.T @ raw @ t_cur
    return project_to_essential(essential)


def decompose_essential(essential: np.ndarray) -> PoseCandidates:
    """Expand an essential matrix into its four pose hypotheses.

    Both candidate rotations are proper (the SVD factors are sign corrected),
    the two translations are an antipodal pair, and the translation magnitude
    is the mean of the two leading singular values.
    """
    e = np.asarray(essential, dtype=float)
    u, s, vt = np.linalg.svd(e)
    if s[1] < 1e-12:
        raise RankDeficient("essential matrix must have two nonzero singular values")
    if np.linalg.det(u) < 0:
        u = u.copy()
        u[:, 2] *= -1.0
    if np.linalg.det(vt) < 0:
        vt = vt.copy()
        vt[2, :] *= -1.0
    magnitude = 0.5 * (s[0] + s[1])
    sigma = np.diag([magnitude, magnitude, 0.0])
    r1 = u @ _RZ90.T @ vt
    r2 = u @ _RZ90 @ vt
    t = vee(u @ _RZ90 @ sigma @ u.T)
    return PoseCandidates(((r1, t), (r1, -t), (r2, t), (r2, -t)))


def triangulate_batch(x_current: np.ndarray, x_desired: np.ndarray,
                      pose: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Depths of many matches at once; the third array flags well-conditioned rows.

    Same normal equations as triangulate, evaluated in closed form for the
    2x2 systems.
    """
    rc = np.asarray(x_current, dtype=float) @ pose.rotation.T
    xd = np.asarray(x_desired, dtype=float)
    # normal matrix entries of [rc, -xd]^T [rc, -xd]
    a11 = np.einsum("ni,ni->n", rc, rc)
    a12 = -np.einsum("ni,ni->n", rc, xd)
    a22 = np.einsum("ni,ni->n", xd, xd)
    b1 = -rc @ pose.translation
    b2 = xd @ pose.translation
    det = a11 * a22 - a12 * a12
    trace = a11 + a22
    # condition number of a symmetric positive 2x2 system via its eigenvalues
    root = np.sqrt(np.maximum(trace * trace - 4.0 * det, 0.0))
    lo = 0.5 * (trace - root)
    ok = lo > 1e-12 * np.maximum(0.5 * (trace + root), 1e-300)
    safe_det = np.where(det != 0, det, 1.0)
    z_c = (a22 * b1 - a12 * b2) / safe_det
    z_d = (a11 * b2 - a12 * b1) / safe_det
    return z_c, z_d, ok


def triangulate(x_current: np.ndarray, x_desired: np.ndarray, pose: Pose) -> tuple[float, float]:
    """Least-squares depths of a match under a desired-from-current pose.

    Solves the three linear equations z_d * x_d = z_c * R x_c + t for the two
    unknown depths.
    """
    rc = pose.rotation @ np.asarray(x_current, dtype=float)
    xd = np.asarray(x_desired, dtype=float)
    a = np.stack([rc, -xd], axis=1)
    normal = a.T @ a
    if np.linalg.cond(normal) > 1e12:
        raise IllConditioned("viewing rays are nearly parallel")
    z = np.linalg.solve(normal, a.T @ (-pose.translation))
    return float(z[0]), float(z[1])


def _depth_census(candidate: tuple, matches: MatchSet) -> tuple[int, float]:
    r, t = candidate
    z_c, z_d, ok = triangulate_batch(matches.current, matches.desired, Pose(r, t))
    positive = int(np.count_nonzero(ok & (z_c > 0) & (z_d > 0)))
    margins = np.minimum(z_c, z_d)[ok]
    margin = float(margins.mean()) if margins.size else -np.inf
    return positive, margin


def select_pose(candidates: PoseCandidates, matches: MatchSet) -> tuple[Pose, float]:
    """Pick the hypothesis with the most matches in front of both cameras.

    Returns the winning pose and its positive-depth fraction. Ties on the
    count prefer the larger mean depth margin, which keeps the choice
    deterministic.
    """
    if len(matches) < 1:
        raise InsufficientMatches("at least one match required for the depth vote")
    best = None
    for cand in candidates.hypotheses:
        count, margin = _depth_census(cand, matches)
        key = (count, margin)
        if best is None or key > best[0]:
            best = (key, cand)
    (count, _), (r, t) = best
    fraction = count / len(matches)
    if fraction < 0.5:
        raise NoValidCandidate(
            f"best hypothesis explains only {fraction:.2f} of the matches")
    return Pose(r, t), fraction


def pose_from_matches(matches: MatchSet, target_mean_depth: float | None = None,
                      hartley: bool = True) -> tuple[Pose, float]:
    """Full estimate / decompose / select pipeline.

    The eight-point translation has arbitrary scale. When target_mean_depth
    is given, the translation is rescaled so that the median triangulated
    depth in the desired view matches it; otherwise the returned translation
    is direction-only with unit norm.
    """
    essential = estimate_essential(matches, hartley=hartley)
    candidates = decompose_essential(essential)
    pose, fraction = select_pose(candidates, matches)
    t = pose.translation
    norm = np.linalg.norm(t)
    if norm < 1e-15:
        raise RankDeficient("recovered translation has zero norm")
    unit_pose = Pose(pose.rotation, t / norm)
    if target_mean_depth is None:
        return unit_pose, fraction
    z_c, z_d, ok = triangulate_batch(matches.current, matches.desired, unit_pose)
    keep = ok & (z_c > 0) & (z_d > 0)
    if not np.any(keep):
        raise NoValidCandidate("no positive-depth matches to fix the translation scale")
    scale = target_mean_depth / float(np.median(z_d[keep]))
    return Pose(unit_pose.rotation, unit_pose.translation * scale), fraction

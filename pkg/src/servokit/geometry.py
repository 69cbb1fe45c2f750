"""Rigid transforms, pinhole cameras, and twist integration.

Conventions used throughout the toolkit: rotations are 3x3 orthonormal
matrices with determinant +1, translations are 3-vectors in meters, and
camera frames are right handed with +z along the optical axis, +x to the
right and +y down in the image. Angles are radians everywhere; degrees
appear only at CLI/reporting boundaries.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth

_MIN_DEPTH = 1e-9
_ORTHO_TOL = 1e-9


def hat(v: np.ndarray) -> np.ndarray:
    # Skew-symmetric matrix such that hat(a) @ b == cross(a, b)
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    # Inverse of hat for (possibly only approximately) skew matrices
    return 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping points from the child frame to the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.linalg.norm(r.T @ r - np.eye(3)) >= _ORTHO_TOL or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to one point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters plus the image and patch-grid dimensions."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    patch_size: int = 16

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width % self.patch_size or self.height % self.patch_size:
            raise ValueError("image dimensions must be divisible by the patch size")

    @property
    def grid_width(self) -> int:
        return self.width // self.patch_size

    @property
    def grid_height(self) -> int:
        return self.height // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_width * self.grid_height


@dataclass(frozen=True, eq=False)
class Twist:
    """Camera velocity in the current camera frame: linear m/s, angular rad/s."""

    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=float).reshape(3)
        ang = np.asarray(self.angular, dtype=float).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(ang))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


@dataclass(frozen=True, eq=False)
class AxisAngle:
    """Rotation as a unit axis and an angle in [0, pi]; the zero rotation is canonicalized to a zero axis."""

    axis: np.ndarray
    angle: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        angle = float(self.angle)
        if angle < 0 or angle > np.pi + 1e-12:
            raise ValueError("angle must lie in [0, pi]")
        if angle > 0 and abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("axis must be unit length for a nonzero angle")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "angle", angle)

    def as_vector(self) -> np.ndarray:
        return self.axis * self.angle


def project(point: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels (..., 2); no clipping to the image."""
    p = np.asarray(point, dtype=float)
    z = p[..., 2]
    if np.any(z <= _MIN_DEPTH):
        raise NonPositiveDepth(f"depth must exceed {_MIN_DEPTH}")
    u = intr.fx * p[..., 0] / z + intr.cx
    v = intr.fy * p[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def normalize_pixel(pixel: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Lift pixels (..., 2) onto the normalized camera plane (..., 3) with unit last component."""
    q = np.asarray(pixel, dtype=float)
    x = (q[..., 0] - intr.cx) / intr.fx
    y = (q[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def relative_pose(world_from_current: Pose, world_from_desired: Pose) -> Pose:
    """Pose of the current camera expressed in the desired camera frame."""
    return world_from_desired.inverse().compose(world_from_current)


def rotation_to_axis_angle(rotation: np.ndarray) -> AxisAngle:
    """Logarithm of a rotation matrix as an axis-angle pair."""
    r = np.asarray(rotation, dtype=float)
    skew = vee(r)  # sin(theta) * axis
    sin_theta = float(np.linalg.norm(skew))
    cos_theta = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    # atan2 keeps full precision near both 0 and pi, unlike arccos
    theta = float(np.arctan2(sin_theta, cos_theta))
    if theta < 1e-12:
        return AxisAngle(np.zeros(3), 0.0)
    if theta > np.pi - 1e-6:
        # Near pi the skew part vanishes; recover the axis from the symmetric
        # part, an exact rank-one outer product of the axis scaled by
        # 1 - cos(theta). Pick the strongest column (ties resolve to the
        # smallest index via argmax).
        sym = 0.5 * (r + r.T) - cos_theta * np.eye(3)
        j = int(np.argmax(np.diag(sym)))
        axis = sym[:, j]
        axis = axis / np.linalg.norm(axis)
        # Orient with the residual skew part when it still carries sign;
        # at exactly pi the positive-index convention fixes the ambiguity.
        s = float(skew @ axis)
        if abs(s) > 1e-12 and s < 0:
            axis = -axis
        return AxisAngle(axis, min(theta, np.pi))
    return AxisAngle(skew / sin_theta, theta)


def axis_angle_to_rotation(axis_angle: AxisAngle) -> np.ndarray:
    """Exponential of an axis-angle pair (Rodrigues formula)."""
    return rotation_from_rotvec(axis_angle.as_vector())


def rotation_from_rotvec(w: np.ndarray) -> np.ndarray:
    """Rotation matrix from a rotation vector (axis times angle)."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    k = hat(w)
    if theta < 1e-8:
        # Second-order Taylor keeps orthonormality to machine precision here
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def rotation_to_rotvec(rotation: np.ndarray) -> np.ndarray:
    aa = rotation_to_axis_angle(rotation)
    return aa.as_vector()


def _se3_translation_factor(w: np.ndarray) -> np.ndarray:
    # V matrix of the SE(3) exponential: translation = V @ (linear displacement)
    theta = float(np.linalg.norm(w))
    k = hat(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    a = (1.0 - np.cos(theta)) / (theta * theta)
    b = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * k + b * (k @ k)


def integrate_twist(pose: Pose, twist: Twist, dt: float) -> Pose:
    """Advance a world-from-camera pose by a body-frame twist over dt seconds.

    The step is the exact SE(3) exponential of the constant twist, applied on
    the right because the twist lives in the camera frame.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = twist.angular * dt
    v = twist.linear * dt
    step = Pose(rotation_from_rotvec(w), _se3_translation_factor(w) @ v)
    return pose.compose(step)

"""Velocity control laws and the controllers that drive servo episodes.

Contains the pose-based law and its inverse, the analytic velocity
denormalization that adapts a canonical-camera unit-scale command to a real
camera and scene scale, the hybrid law mixing Cartesian and image-space
errors, the norm/direction supervision helpers, and controller objects that
map observations to twists. Controllers hold only immutable gains plus a
one-bit mode latch, so each episode must use its own instance.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from . import epipolar
from . import matching
from .errors import (
    DegenerateConfiguration,
    InvalidConfig,
    NonPositiveNorm,
    RankDeficient,
    RotationOutOfRange,
    SingularJacobian,
    ZeroDirection,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    hat,
    rotation_from_rotvec,
    rotation_to_axis_angle,
)

# Camera configuration the normalized (unit-world) policy is defined in
CANONICAL_INTRINSICS = CameraIntrinsics(fx=512.0, fy=512.0, cx=256.0, cy=256.0,
                                        width=512, height=512, patch_size=16)


class ControlMode(enum.Enum):
    HYBRID = "hybrid"
    PBVS = "pbvs"


@dataclass(frozen=True)
class ControlGains:
    """Error decay rate (1/s), mode-switch factor, and controller period (s)."""

    lam: float = 1.0
    switch_threshold_factor: float = 0.1
    dt: float = 0.05

    def __post_init__(self):
        if self.lam <= 0 or self.dt <= 0:
            raise ValueError("lam and dt must be positive")


@dataclass(frozen=True)
class DenormParams:
    """Real camera and scene scale against the canonical training configuration."""

    real: CameraIntrinsics
    scene_scale: float
    canonical: CameraIntrinsics = CANONICAL_INTRINSICS

    def __post_init__(self):
        if self.scene_scale <= 0:
            raise ValueError("scene scale must be positive")
        sx = self.real.fx / self.canonical.fx
        sy = self.real.fy / self.canonical.fy
        if abs(sx - sy) > 1e-9 * max(sx, sy):
            raise ValueError("focal adaptation assumes isotropic focal scaling")

    @property
    def focal_scale(self) -> float:
        return self.real.fx / self.canonical.fx


@dataclass(frozen=True, eq=False)
class VelocityParam:
    """Log-norm and direction parametrization of a 6-D velocity."""

    log_norm: float
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(6)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True, eq=False)
class HybridError:
    """Mixed error vector: translation (m), gravity-center gap (patches), yaw component (rad)."""

    translation: np.ndarray
    gravity: np.ndarray
    yaw: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.gravity, [self.yaw]])


def pbvs(rel: Pose, lam: float) -> Twist:
    """Velocity that decays the relative pose error exponentially.

    rel is desired-from-current; linear velocity pulls the camera along the
    straight Cartesian line, angular velocity unwinds the axis-angle error.
    """
    aa = rotation_to_axis_angle(rel.rotation)
    nu = -lam * rel.rotation.T @ rel.translation
    omega = -lam * aa.as_vector()
    return Twist(nu, omega)


def inverse_pbvs(twist: Twist, lam: float) -> Pose:
    """Recover the relative pose a velocity command encodes (exact inverse of pbvs)."""
    w = -twist.angular / lam
    if np.linalg.norm(w) >= np.pi:
        raise RotationOutOfRange("encoded rotation magnitude must be below pi")
    rotation = rotation_from_rotvec(w)
    translation = -(1.0 / lam) * rotation @ twist.linear
    return Pose(rotation, translation)


def _geodesic_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    return rotation_to_axis_angle(ra.T @ rb).angle


def denormalize_velocity(twist_norm: Twist, params: DenormParams, lam: float) -> Twist:
    """Map a canonical-camera unit-scale velocity to the real configuration.

    The command is first decoded back to a relative pose. A focal change
    rescales the normalized image plane, so the pose is pushed through the
    rescaled epipolar constraint: the warped matrix is projected back onto
    the essential manifold, decomposed, and the candidate nearest the decoded
    rotation (with the sign-consistent translation) is kept. Scene scale then
    multiplies the translation, and the control law is reapplied. A pure
    rotation is unaffected by focal scaling and passes through unchanged.
    """
    decoded = inverse_pbvs(twist_norm, lam)
    rot_n, t_n = decoded.rotation, decoded.translation
    s_f = params.focal_scale
    t_norm = float(np.linalg.norm(t_n))
    if abs(s_f - 1.0) <= 1e-12:
        rot_hat, t_hat = rot_n, params.scene_scale * t_n
    elif t_norm <= 1e-12:
        rot_hat, t_hat = rot_n, np.zeros(3)
    else:
        scale_mat = np.diag([s_f, s_f, 1.0])
        warped = scale_mat.T @ hat(t_n) @ rot_n @ scale_mat
        essential = epipolar.project_to_essential(warped)
        try:
            candidates = epipolar.decompose_essential(essential)
        except RankDeficient as exc:
            raise DegenerateConfiguration("focal-warped command has no epipolar structure") from exc
        reference = np.linalg.solve(scale_mat, t_n)
        best = None
        for r_cand, t_cand in candidates.hypotheses:
            angle = _geodesic_angle(r_cand, rot_n)
            aligned = float(t_cand @ reference)
            key = (angle, -aligned)
            if best is None or key < best[0]:
                best = (key, r_cand, t_cand)
        _, rot_hat, t_sel = best
        direction = t_sel / np.linalg.norm(t_sel)
        t_hat = params.scene_scale * t_norm * direction
    return pbvs(Pose(rot_hat, t_hat), lam)


def _patch_to_normalized(coord: np.ndarray, intr: CameraIntrinsics) -> tuple[float, float]:
    # Patch-unit coordinate to normalized image plane via the patch center pixel
    u = (coord[0] + 0.5) * intr.patch_size
    v = (coord[1] + 0.5) * intr.patch_size
    return (u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy


def hybrid_error(rel: Pose, xg_current: np.ndarray, xg_desired: np.ndarray) -> HybridError:
    aa = rotation_to_axis_angle(rel.rotation)
    return HybridError(translation=rel.translation,
                       gravity=np.asarray(xg_current, float) - np.asarray(xg_desired, float),
                       yaw=aa.angle * aa.axis[2])


def hybrid_jacobian(rel: Pose, xg_current: np.ndarray, depth_est: float,
                    intr: CameraIntrinsics = CANONICAL_INTRINSICS) -> np.ndarray:
    """Jacobian of the hybrid error with respect to the camera twist.

    Assembled block-wise: the translation rows are the relative rotation
    (translation error moves with the rotated linear velocity), the
    gravity-center rows are the standard point interaction matrix of the
    current center at the estimated depth, rescaled from normalized units to
    patch units, and the yaw row takes the z angular rate directly, a
    small-rotation approximation of the axis-angle rate.
    """
    x, y = _patch_to_normalized(np.asarray(xg_current, float), intr)
    z = depth_est
    interaction = np.array([
        [-1.0 / z, 0.0, x / z, x * y, -(1.0 + x * x), y],
        [0.0, -1.0 / z, y / z, 1.0 + y * y, -x * y, -x],
    ])
    jac = np.zeros((6, 6))
    jac[0:3, 0:3] = rel.rotation
    jac[3] = (intr.fx / intr.patch_size) * interaction[0]
    jac[4] = (intr.fy / intr.patch_size) * interaction[1]
    jac[5, 5] = 1.0
    return jac


def hybrid_control(rel: Pose, xg_current: np.ndarray, xg_desired: np.ndarray,
                   depth_est: float, lam: float,
                   intr: CameraIntrinsics = CANONICAL_INTRINSICS) -> Twist:
    """Mixed Cartesian / image-space law driving the stacked error to zero."""
    err = hybrid_error(rel, xg_current, xg_desired).as_vector()
    jac = hybrid_jacobian(rel, xg_current, depth_est, intr)
    if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > 1e10:
        raise SingularJacobian("hybrid Jacobian is not reliably invertible")
    v = -lam * np.linalg.solve(jac, err)
    return Twist(v[:3], v[3:])


def select_mode(xg_current: np.ndarray, xg_desired: np.ndarray, num_patches: int) -> ControlMode:
    """Hybrid while the gravity centers are far apart, else the pose-based law.

    The threshold grows with the square root of the patch count; the boundary
    itself selects the pose-based law (strict inequality for hybrid).
    """
    gap = np.linalg.norm(np.asarray(xg_current, float) - np.asarray(xg_desired, float))
    if gap > 0.1 * np.sqrt(num_patches):
        return ControlMode.HYBRID
    return ControlMode.PBVS


def sigma(x: float) -> float:
    """Norm activation: exponential below one, identity above; continuous and increasing."""
    x = float(x)
    return float(np.exp(x - 1.0)) if x <= 1.0 else x


def sigma_inv(y: float) -> float:
    y = float(y)
    if y <= 0:
        raise NonPositiveNorm("sigma is positive, cannot invert a non-positive value")
    return 1.0 + float(np.log(y)) if y <= 1.0 else y


def decode_velocity(param: VelocityParam) -> Twist:
    """Velocity from the log-norm / direction parametrization."""
    norm_dir = float(np.linalg.norm(param.direction))
    if norm_dir <= 1e-12:
        raise ZeroDirection("direction vector has near-zero length")
    v = sigma(param.log_norm) * param.direction / norm_dir
    return Twist(v[:3], v[3:])


def loss_norm(target: np.ndarray, log_norm: float) -> float:
    """L1 gap between the encoded log-norm and the target velocity norm."""
    magnitude = float(np.linalg.norm(np.asarray(target, float).reshape(6)))
    return abs(sigma_inv(magnitude) - float(log_norm))


def loss_dir(target: np.ndarray, predicted: np.ndarray) -> float:
    """Cosine-similarity loss between velocity directions, in [0, 2]."""
    a = np.asarray(target, float).reshape(6)
    b = np.asarray(predicted, float).reshape(6)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= 0 or nb <= 0:
        raise NonPositiveNorm("direction loss needs nonzero velocities")
    return float(1.0 - (a @ b) / (na * nb))


def clamp_twist(twist: Twist, max_linear: float, max_angular: float) -> tuple[Twist, bool]:
    """Scale the linear and angular parts down to their safety limits."""
    nu = twist.linear
    omega = twist.angular
    clamped = False
    n = np.linalg.norm(nu)
    if n > max_linear:
        nu = nu * (max_linear / n)
        clamped = True
    n = np.linalg.norm(omega)
    if n > max_angular:
        omega = omega * (max_angular / n)
        clamped = True
    return Twist(nu, omega), clamped


# ---------------------------------------------------------------------------
# Controllers. Each consumes the observation channels listed in `requires`
# and returns a twist plus a per-step info dict for the trajectory log.


class Controller:
    requires: frozenset = frozenset()

    def reset(self) -> None:
        pass

    def step(self, obs) -> tuple[Twist, dict]:
        raise NotImplementedError


@dataclass
class OraclePbvsController(Controller):
    """Pose-based law on the ground-truth relative pose."""

    gains: ControlGains
    requires = frozenset({"pose"})

    def step(self, obs):
        return pbvs(obs.true_pose, self.gains.lam), {"mode": "pbvs"}


@dataclass
class NormalizedOraclePbvsController(Controller):
    """Unit-world policy stand-in: the pose-based command the ground truth would
    produce if the scene had unit scale. Emits a normalized velocity."""

    gains: ControlGains
    requires = frozenset({"pose"})

    def step(self, obs):
        rel = obs.true_pose
        normalized = Pose(rel.rotation, rel.translation / obs.scene_scale)
        return pbvs(normalized, self.gains.lam), {"mode": "pbvs"}


@dataclass
class EpipolarPbvsController(Controller):
    """Pose-based law on a pose estimated from the explicit matches.

    The eight-point translation is direction-only, so it is rescaled to put
    the median triangulated desired-view depth at target_depth (the scene
    scale for real-unit control, one for normalized control).
    """

    gains: ControlGains
    target_depth: float | None = None  # None means use the observed scene scale
    requires = frozenset({"matches"})

    def step(self, obs):
        depth = self.target_depth if self.target_depth is not None else obs.scene_scale
        pose, fraction = epipolar.pose_from_matches(obs.matches, target_mean_depth=depth)
        return pbvs(pose, self.gains.lam), {"mode": "pbvs", "depth_inliers": fraction}


@dataclass
class HybridController(Controller):
    """Hybrid law with a one-way switch to the pose-based law when close.

    Gravity centers come from the mutual-confidence weighting of the score
    matrices; the pose comes from the explicit matches (or the oracle channel
    when pose_source is "oracle"). Once the centers are near, the controller
    latches into the pose-based law for the rest of the episode.
    """

    gains: ControlGains
    pose_source: str = "epipolar"
    latched: bool = field(default=False)
    requires = frozenset({"scores", "matches", "pose"})

    def reset(self):
        self.latched = False

    def _pose(self, obs) -> Pose:
        if self.pose_source == "oracle":
            return obs.true_pose
        pose, _ = epipolar.pose_from_matches(obs.matches, target_mean_depth=obs.scene_scale)
        return pose

    def step(self, obs):
        conf = matching.dual_softmax_confidence(obs.score_cd, obs.score_dc)
        match = matching.expected_match(obs.score_cd)
        xg_c, xg_d = matching.gravity_centers(conf, match)
        pose = self._pose(obs)
        n16 = obs.score_cd.values.shape[0]
        mode = ControlMode.PBVS if self.latched else select_mode(xg_c, xg_d, n16)
        info = {"mode": mode.value, "xg_c": xg_c.tolist(), "xg_d": xg_d.tolist()}
        if mode is ControlMode.PBVS:
            self.latched = True
            return pbvs(pose, self.gains.lam), info
        twist = hybrid_control(pose, xg_c, xg_d, obs.scene_scale, self.gains.lam,
                               intr=obs.intrinsics)
        return twist, info


@dataclass
class DenormalizingController(Controller):
    """Wrap a normalized controller; apply the analytic denormalization when aware."""

    inner: Controller
    params: DenormParams
    aware: bool = True

    def __post_init__(self):
        self.requires = self.inner.requires

    def reset(self):
        self.inner.reset()

    def step(self, obs):
        twist, info = self.inner.step(obs)
        if self.aware:
            twist = denormalize_velocity(twist, self.params, self.inner.gains.lam)
        return twist, info


CONTROLLER_IDS = ("oracle-pbvs", "epipolar-pbvs", "hybrid")


def make_controller(controller_id: str, gains: ControlGains, intr: CameraIntrinsics,
                    scene_scale: float, denorm_mode: str = "off",
                    hybrid_pose_source: str = "epipolar") -> Controller:
    """Build a controller, optionally wrapped for canonical-camera emulation.

    With denorm_mode "aware" or "unaware" the inner controller predicts in
    the unit world (translations scaled to unit scene depth); aware wraps it
    with the analytic denormalization, unaware executes the normalized
    command as-is.
    """
    if controller_id not in CONTROLLER_IDS:
        raise InvalidConfig(f"unknown controller {controller_id!r}")
    if denorm_mode not in ("off", "aware", "unaware"):
        raise InvalidConfig(f"unknown denorm mode {denorm_mode!r}")
    if denorm_mode == "off":
        if controller_id == "oracle-pbvs":
            return OraclePbvsController(gains)
        if controller_id == "epipolar-pbvs":
            return EpipolarPbvsController(gains)
        return HybridController(gains, pose_source=hybrid_pose_source)
    if controller_id == "oracle-pbvs":
        inner: Controller = NormalizedOraclePbvsController(gains)
    elif controller_id == "epipolar-pbvs":
        inner = EpipolarPbvsController(gains, target_depth=1.0)
    else:
        raise InvalidConfig("hybrid control does not support denormalized operation")
    params = DenormParams(real=intr, scene_scale=scene_scale)
    return DenormalizingController(inner, params, aware=(denorm_mode == "aware"))

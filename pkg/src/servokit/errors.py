"""Exception types raised across the toolkit.

Every error derives from ServoKitError so callers can catch toolkit
failures with a single except clause. The batch runner relies on this to
turn per-episode failures into failure records instead of aborting.
"""


class ServoKitError(Exception):
    """Base class for all toolkit errors."""


class NonPositiveDepth(ServoKitError):
    """A point has depth at or below the projection cutoff."""


class InsufficientMatches(ServoKitError):
    """Fewer correspondences than the estimator requires."""


class DegenerateConfiguration(ServoKitError):
    """Correspondences do not constrain a unique essential matrix."""


class RankDeficient(ServoKitError):
    """Matrix lacks the rank required for decomposition."""


class NoValidCandidate(ServoKitError):
    """No decomposition hypothesis passes the positive-depth vote."""


class IllConditioned(ServoKitError):
    """Linear system too close to singular to solve reliably."""


class DimensionMismatch(ServoKitError):
    """Operands have incompatible shapes."""


class ZeroConfidence(ServoKitError):
    """Total matching confidence too small to normalize."""


class RotationOutOfRange(ServoKitError):
    """Requested rotation magnitude is outside the invertible range."""


class SingularJacobian(ServoKitError):
    """Control Jacobian is not invertible at the current state."""


class NonPositiveNorm(ServoKitError):
    """A norm that must be positive is zero or negative."""


class ZeroDirection(ServoKitError):
    """Direction vector has (near) zero length."""


class SamplingExhausted(ServoKitError):
    """Rejection sampling hit the attempt limit."""


class NoVisiblePoints(ServoKitError):
    """A view observes no scene points at all."""


class UnknownSuite(ServoKitError):
    """Requested ablation suite id is not defined."""


class SchemaMismatch(ServoKitError):
    """Serialized data does not match the documented schema."""


class IoFailure(ServoKitError):
    """Reading or writing an artifact failed."""


class InvalidConfig(ServoKitError):
    """Configuration value is missing, unknown, or out of range."""

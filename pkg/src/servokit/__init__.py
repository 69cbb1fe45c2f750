"""Visual-servo geometry and control toolkit with a synthetic benchmark harness."""

from .geometry import AxisAngle, CameraIntrinsics, Pose, Twist
from .epipolar import MatchSet
from .matching import ProbMatchTensor, ScoreMatrix
from .control import CANONICAL_INTRINSICS, ControlGains, DenormParams
from .simulator import EpisodeConfig, EpisodeResult, NoiseModel, Scene, SceneConfig

__version__ = "0.1.0"

__all__ = [
    "AxisAngle",
    "CameraIntrinsics",
    "Pose",
    "Twist",
    "MatchSet",
    "ProbMatchTensor",
    "ScoreMatrix",
    "CANONICAL_INTRINSICS",
    "ControlGains",
    "DenormParams",
    "EpisodeConfig",
    "EpisodeResult",
    "NoiseModel",
    "Scene",
    "SceneConfig",
    "__version__",
]

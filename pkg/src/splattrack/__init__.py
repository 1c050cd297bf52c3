"""Monocular pose + joint-angle tracking of an articulated tool by differentiable splatting."""

from .errors import SplatTrackError
from .geometry import Intrinsics, Pose, Rotation, TangentUpdate
from .renderer import Frame, LossConfig, RenderSettings, render
from .tool_model import JointLimits, ToolModel, default_tool_model, load_tool_model, save_tool_model
from .estimator import CoarseConfig, FrameEstimate, RefinerConfig, coarse_estimate, refine, track_sequence
from .metrics_io import MetricsReport, Trajectory, TrajectoryRecord, ade, fde, per_axis_error
from .synthlab import DatasetSpec, SequenceSpec, generate_dataset, generate_sequence, fit_canonical_model

__all__ = [
    "SplatTrackError",
    "Intrinsics",
    "Pose",
    "Rotation",
    "TangentUpdate",
    "Frame",
    "LossConfig",
    "RenderSettings",
    "render",
    "JointLimits",
    "ToolModel",
    "default_tool_model",
    "load_tool_model",
    "save_tool_model",
    "CoarseConfig",
    "FrameEstimate",
    "RefinerConfig",
    "coarse_estimate",
    "refine",
    "track_sequence",
    "MetricsReport",
    "Trajectory",
    "TrajectoryRecord",
    "ade",
    "fde",
    "per_axis_error",
    "DatasetSpec",
    "SequenceSpec",
    "generate_dataset",
    "generate_sequence",
    "fit_canonical_model",
]

__version__ = "0.1.0"

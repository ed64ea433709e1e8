__all__ = [
    "CropwayError",
    "ShapeError",
    "GradientError",
    "ConfigError",
    "CheckpointError",
    "TargetError",
    "ClusteringError",
    "MetricError",
    "PlanningError",
    "DatasetError",
]


class CropwayError(Exception):
    """Base class for every error raised by cropway."""


class ShapeError(CropwayError, ValueError):
    """Tensor shapes, axes or broadcasting do not line up."""


class GradientError(CropwayError, ValueError):
    """Backward pass or optimizer step received something it cannot differentiate or apply."""


class ConfigError(CropwayError, ValueError):
    """A configuration value is out of its valid range."""


class CheckpointError(CropwayError, ValueError):
    """Checkpoint file is corrupted, truncated or does not match the model."""


class TargetError(CropwayError, ValueError):
    """Ground-truth waypoints cannot be encoded into a target grid."""


class ClusteringError(CropwayError, ValueError):
    """Inputs of a clustering step are degenerate."""


class MetricError(CropwayError, ValueError):
    """A metric is undefined for the given inputs."""


class PlanningError(CropwayError, ValueError):
    """Labeled waypoints cannot be turned into a coverage path."""


class DatasetError(CropwayError, ValueError):
    """Dataset directory is missing, empty or malformed."""

"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class LidarPoseError(Exception):
    """Base class for package errors."""


class ConfigError(LidarPoseError):
    """Invalid configuration value or inconsistent option combination."""


class DataError(LidarPoseError):
    """Unreadable, malformed, or inconsistent input data."""


class SceneFormatError(DataError):
    """Malformed scene record; message names the record index and field."""


class FeatureLookupError(DataError):
    """Requested (scene id, box index) not present in a feature file."""


class GeometryError(LidarPoseError):
    """Geometrically impossible request (e.g. sensor inside a body capsule)."""


class PlacementError(LidarPoseError):
    """Scene composition could not place all humans without box overlap."""


class NumericalError(LidarPoseError):
    """Non-finite values encountered in the compute graph."""


class TrainingDiverged(NumericalError):
    """Training loss became non-finite; last good checkpoint is retained."""


class CheckpointError(DataError):
    """Checkpoint file malformed or incompatible with the model config."""

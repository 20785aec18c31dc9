"""LiDAR-only 3D human pose estimation: box-local feature assembly, a
keypoint-query transformer, multi-task training, and pose metrics, with a
procedural synthetic-pedestrian generator for desk-scale experiments."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig
from .geometry import Box3D, KeypointSet, Scene

__all__ = ["ModelConfig", "TrainConfig", "Box3D", "KeypointSet", "Scene", "__version__"]

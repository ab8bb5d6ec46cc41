"""Compositional action recognition from box trajectories."""

from .estimator import STINClassifier
from .geometry import Box, encode, decode, iou
from .model import ModelConfig
from .tracker import SortTracker, TrackerParams, assign

__all__ = ["STINClassifier", "ModelConfig", "Box", "encode", "decode", "iou", "SortTracker", "TrackerParams", "assign"]
__version__ = "0.1.0"

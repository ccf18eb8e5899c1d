"""Doubly-online changepoint detection for panels of multivariate activities."""

from .estimator import ChangepointDetector
from .model import ActivityPanel, Family, ModelSpec, SegmentIndex, Theta, sim_spec, warmup_spec
from .onlineem import EngineConfig, OnlineEM
from .simlab import SimSpec, generate, score, sweep

__all__ = [
    "ActivityPanel",
    "ChangepointDetector",
    "EngineConfig",
    "Family",
    "ModelSpec",
    "OnlineEM",
    "SegmentIndex",
    "SimSpec",
    "Theta",
    "generate",
    "score",
    "sim_spec",
    "sweep",
    "warmup_spec",
]

__version__ = "0.1.0"

"""
fhrvae
Supervised β-TC variational autoencoder for fetal heart rate segments
"""

from .checkpoint import ModelCheckpoint
from .config import RunConfig, RunConfigLoader
from .errors import FhrVaeError
from .models import CtgRecord, FhrSegment, SegmentSet
from .pipeline import Pipeline, create_pipeline
from .vae import SupervisedVae

__version__ = "0.1.0"

__all__ = [
    "CtgRecord",
    "FhrSegment",
    "FhrVaeError",
    "ModelCheckpoint",
    "Pipeline",
    "RunConfig",
    "RunConfigLoader",
    "SegmentSet",
    "SupervisedVae",
    "create_pipeline",
]

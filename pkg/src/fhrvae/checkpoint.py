"""
Versioned model checkpoints
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from pydantic import ValidationError

from .config import ModelConfig
from .errors import CheckpointMismatchError, DataValidationError
from .formats import CHECKPOINT_KIND, decode_container, encode_container, atomic_write_bytes
from .models import NormStats
from .vae import SupervisedVae, parameter_shapes

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.bin"
ARCHITECTURE_FIELDS = ("latent_dim", "d_model", "token_patch", "ffn_multiplier", "precision")


@dataclass
class ModelCheckpoint:
    """Learned parameters, the configuration and normalisation that produced them, and training metadata"""
    config: ModelConfig
    norm_stats: NormStats
    params: Dict[str, np.ndarray]
    training: Dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = {
            "model_config": self.config.model_dump(mode="json"),
            "norm_stats": self.norm_stats.model_dump(mode="json"),
            "training": self.training,
        }
        return encode_container(CHECKPOINT_KIND, meta, self.params)

    def save(self, path: Path) -> None:
        atomic_write_bytes(path, self.to_bytes())
        logger.info(f"Saved checkpoint with {len(self.params)} parameter arrays to {path}")

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ModelCheckpoint":
        meta, arrays = decode_container(payload, CHECKPOINT_KIND)
        try:
            config = ModelConfig.model_validate(meta["model_config"])
            stats = NormStats.model_validate(meta["norm_stats"])
        except (KeyError, ValidationError) as e:
            raise DataValidationError(f"checkpoint metadata is invalid: {e}") from e
        expected = parameter_shapes(config)
        found = {name: tuple(a.shape) for name, a in arrays.items()}
        if found != expected:
            raise CheckpointMismatchError("checkpoint parameters do not match the layout its configuration implies")
        return cls(config=config, norm_stats=stats, params=arrays, training=dict(meta.get("training", {})))

    @classmethod
    def load(cls, path: Path, expected: Optional[ModelConfig] = None) -> "ModelCheckpoint":
        """
        Read a checkpoint. When `expected` is given, every architecture key it
        sets explicitly must agree with the stored configuration.
        """
        try:
            payload = Path(path).read_bytes()
        except FileNotFoundError as e:
            raise DataValidationError(f"checkpoint not found: {path}") from e
        checkpoint = cls.from_bytes(payload)
        if expected is not None:
            checkpoint.check_compatible(expected)
        return checkpoint

    def check_compatible(self, expected: ModelConfig) -> None:
        for name in ARCHITECTURE_FIELDS:
            if name not in expected.model_fields_set:
                continue
            stored, wanted = getattr(self.config, name), getattr(expected, name)
            if stored != wanted:
                raise CheckpointMismatchError(
                    f"checkpoint was trained with {name}={stored}, configuration asks for {name}={wanted}"
                )

    def model(self) -> SupervisedVae:
        return SupervisedVae(self.config, self.params)

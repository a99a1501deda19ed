"""
Training loop for the supervised VAE
Balanced minibatches, adaptive β/λ control and early stopping on validation loss
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ad
from .autograd import AdamOptimizer
from .checkpoint import ModelCheckpoint
from .config import ModelConfig
from .errors import DataValidationError
from .history import TrainingHistory
from .models import NormStats, SegmentSet
from .preprocess import model_inputs
from .vae import SupervisedVae, coeff_update, total_loss

logger = logging.getLogger(__name__)


@dataclass
class ModelInputs:
    """Standardised values, masks, spectra and labels aligned row by row"""
    values: np.ndarray
    mask: np.ndarray
    fft: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def from_segments(cls, segments: SegmentSet, stats: NormStats) -> "ModelInputs":
        values, mask, fft = model_inputs(segments, stats)
        return cls(values=values, mask=mask, fft=fft, labels=segments.labels.astype(np.int64))

    def take(self, index: np.ndarray) -> "ModelInputs":
        return ModelInputs(self.values[index], self.mask[index], self.fft[index], self.labels[index])

    def astype(self, dtype: np.dtype) -> "ModelInputs":
        return ModelInputs(self.values.astype(dtype), self.mask, self.fft.astype(dtype), self.labels)


class BalancedBatchSampler:
    """
    Half of every batch comes from each class. The larger class is walked in
    shuffled order (reshuffled when exhausted); the smaller one is drawn with
    replacement to match.
    """

    def __init__(self, labels: np.ndarray, batch_size: int, rng: np.random.Generator):
        if batch_size % 2:
            raise DataValidationError("batch_size must be even for balanced batches")
        labels = np.asarray(labels)
        self.half = batch_size // 2
        self.by_class = {c: np.flatnonzero(labels == c) for c in (0, 1)}
        empty = [c for c, idx in self.by_class.items() if idx.size == 0]
        if empty:
            raise DataValidationError(f"training split has no segments of class {empty[0]}")
        self.majority = 0 if self.by_class[0].size >= self.by_class[1].size else 1
        self.rng = rng

    def __len__(self) -> int:
        return math.ceil(self.by_class[self.majority].size / self.half)

    def batches(self) -> List[np.ndarray]:
        n_batches = len(self)
        major = self.by_class[self.majority]
        minor = self.by_class[1 - self.majority]
        need = n_batches * self.half
        order = np.concatenate(
            [self.rng.permutation(major) for _ in range(math.ceil(need / major.size))]
        )[:need]
        extra = minor[self.rng.integers(0, minor.size, need)]
        return [
            np.concatenate([order[b * self.half:(b + 1) * self.half], extra[b * self.half:(b + 1) * self.half]])
            for b in range(n_batches)
        ]


@dataclass
class TrainingResult:
    checkpoint: ModelCheckpoint
    history: TrainingHistory
    best_epoch: int


class Trainer:
    """Owns the model, optimizer and controller state for one training run"""

    def __init__(self, config: ModelConfig, norm_stats: NormStats, model: Optional[SupervisedVae] = None):
        self.config = config
        self.norm_stats = norm_stats
        self.model = model or SupervisedVae(config)
        self.optimizer = AdamOptimizer(
            self.model.params,
            lr=config.learning_rate,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
        )
        self.rng = np.random.default_rng(config.seed)
        self.beta = config.beta_init
        self.lam = config.lambda_init
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    def _loss(self, data: ModelInputs, noise: Optional[np.ndarray], dataset_size: int):
        out = self.model.forward(data.values, data.mask, data.fft, noise)
        return total_loss(
            out,
            data.values,
            data.mask,
            data.labels,
            self.norm_stats.sd,
            self.beta,
            self.lam,
            dataset_size,
            self.config.focal_gamma,
        )

    def train_epoch(self, data: ModelInputs, sampler: BalancedBatchSampler) -> Dict[str, float]:
        totals = {"loss": 0.0, "mse": 0.0, "focal": 0.0, "kl": 0.0, "tc": 0.0}
        batches = sampler.batches()
        for index in batches:
            batch = data.take(index)
            noise = self.rng.standard_normal((len(batch), self.config.latent_dim))
            terms = self._loss(batch, noise, len(data))
            ad.backward(terms.total)
            self.optimizer.step()
            self.optimizer.zero_grad()
            totals["loss"] += terms.total.item()
            totals["mse"] += terms.mse
            totals["focal"] += terms.focal
            totals["kl"] += terms.kl
            totals["tc"] += terms.tc
        return {k: v / len(batches) for k, v in totals.items()}

    def evaluate(self, data: ModelInputs, dataset_size: int) -> Dict[str, float]:
        """Loss components with z = mu, weighted by chunk size."""
        n = len(data)
        if n == 0:
            raise DataValidationError("validation split is empty")
        chunks = np.array_split(np.arange(n), max(1, n // self.config.batch_size))
        totals = {"loss": 0.0, "mse": 0.0, "focal": 0.0, "kl": 0.0, "tc": 0.0}
        with ad.no_grad():
            for index in chunks:
                terms = self._loss(data.take(index), None, dataset_size)
                weight = len(index) / n
                totals["loss"] += weight * terms.total.item()
                totals["mse"] += weight * terms.mse
                totals["focal"] += weight * terms.focal
                totals["kl"] += weight * terms.kl
                totals["tc"] += weight * terms.tc
        return totals

    def update_coefficients(self, kl: float, tc: float) -> Tuple[float, float]:
        if self.config.adapt_coefficients:
            cfg = self.config
            self.beta = coeff_update(self.beta, kl, cfg.kl_target_per_dim, cfg.controller_gain, cfg.beta_bounds)
            self.lam = coeff_update(
                self.lam, tc, cfg.tc_target, cfg.controller_gain, cfg.lambda_bounds, snap_to_zero=True
            )
        return self.beta, self.lam

    def fit(self, train: ModelInputs, validation: ModelInputs) -> TrainingResult:
        dtype = np.dtype(self.config.precision)
        train, validation = train.astype(dtype), validation.astype(dtype)
        sampler = BalancedBatchSampler(train.labels, self.config.batch_size, self.rng)
        history = TrainingHistory()
        best_loss = math.inf
        best_epoch = 0
        best_state = self.model.state()
        stale = 0
        self.logger.info(
            f"Training on {len(train)} segments ({len(sampler)} batches/epoch), validating on {len(validation)}"
        )

        for epoch in range(1, self.config.max_epochs + 1):
            started = time.perf_counter()
            beta, lam = self.beta, self.lam
            train_terms = self.train_epoch(train, sampler)
            val_terms = self.evaluate(validation, len(train))
            row = {"epoch": epoch, "beta": beta, "lambda": lam}
            row.update({f"train_{k}": v for k, v in train_terms.items()})
            row.update({f"val_{k}": v for k, v in val_terms.items()})
            history.record(**row)
            self.update_coefficients(train_terms["kl"], train_terms["tc"])
            self.logger.info(
                f"epoch {epoch}: train {train_terms['loss']:.4f} val {val_terms['loss']:.4f} "
                f"KL/dim {train_terms['kl']:.3f} TC {train_terms['tc']:.3f} "
                f"beta {self.beta:.4g} lambda {self.lam:.4g} ({time.perf_counter() - started:.1f}s)"
            )
            if val_terms["loss"] < best_loss:
                best_loss, best_epoch, stale = val_terms["loss"], epoch, 0
                best_state = self.model.state()
            else:
                stale += 1
                if stale >= self.config.patience:
                    self.logger.info(f"Early stopping after epoch {epoch}; best epoch {best_epoch}")
                    break

        frame = history.to_pandas()
        last = frame.iloc[-1]
        checkpoint = ModelCheckpoint(
            config=self.config,
            norm_stats=self.norm_stats,
            params=best_state,
            training={
                "epochs_run": int(last["epoch"]),
                "best_epoch": best_epoch,
                "best_val_loss": float(best_loss),
                "final_beta": float(self.beta),
                "final_lambda": float(self.lam),
                "final_kl": float(last["train_kl"]),
                "final_tc": float(last["train_tc"]),
                "train_segments": len(train),
            },
        )
        return TrainingResult(checkpoint=checkpoint, history=history, best_epoch=best_epoch)


def train(
    config: ModelConfig,
    train_data: ModelInputs,
    validation_data: ModelInputs,
    norm_stats: NormStats,
) -> TrainingResult:
    """Train a fresh model; returns the best-validation checkpoint and the full history."""
    if len(train_data) == 0:
        raise DataValidationError("training split is empty")
    return Trainer(config, norm_stats).fit(train_data, validation_data)

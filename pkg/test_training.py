"""
Tests for balanced sampling, coefficient control and the training loop
"""

import numpy as np
import pytest

from fhrvae.config import ModelConfig
from fhrvae.errors import DataValidationError
from fhrvae.history import HISTORY_COLUMNS, TrainingHistory
from fhrvae.models import FFT_BINS, SEGMENT_SAMPLES, NormStats
from fhrvae.training import BalancedBatchSampler, ModelInputs, Trainer, train

STATS = NormStats(mean=140.0, sd=10.0)


def small_config(**overrides):
    values = dict(
        latent_dim=4, d_model=8, token_patch=100, batch_size=8, max_epochs=2, patience=5, precision="float64", seed=3
    )
    values.update(overrides)
    return ModelConfig(**values)


def make_inputs(n_npo, n_apo, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.array([0] * n_npo + [1] * n_apo, dtype=np.int64)
    values = rng.normal(size=(labels.size, SEGMENT_SAMPLES)) * 0.5 + labels[:, None] * 0.5
    mask = np.zeros((labels.size, SEGMENT_SAMPLES), dtype=np.int8)
    fft = rng.uniform(size=(labels.size, FFT_BINS))
    return ModelInputs(values=values, mask=mask, fft=fft, labels=labels)


class TestBalancedBatchSampler:
    """Tests for class-balanced minibatches"""

    def test_each_batch_is_half_and_half(self):
        labels = np.array([0] * 10 + [1] * 3)
        sampler = BalancedBatchSampler(labels, 4, np.random.default_rng(0))
        batches = sampler.batches()
        assert len(batches) == len(sampler) == 5
        for batch in batches:
            assert batch.size == 4
            assert int(labels[batch].sum()) == 2
        majority = np.concatenate([b[:2] for b in batches])
        assert sorted(majority.tolist()) == list(range(10))

    def test_odd_batch_rejected(self):
        with pytest.raises(DataValidationError, match="even"):
            BalancedBatchSampler(np.array([0, 1]), 3, np.random.default_rng(0))

    def test_missing_class_rejected(self):
        with pytest.raises(DataValidationError, match="class 1"):
            BalancedBatchSampler(np.zeros(6, dtype=int), 4, np.random.default_rng(0))


class TestCoefficients:
    """Tests for the per-epoch β and λ updates"""

    def test_fixed_when_adaptation_disabled(self):
        trainer = Trainer(small_config(adapt_coefficients=False, beta_init=0.5, lambda_init=2.0), STATS)
        assert trainer.update_coefficients(kl=50.0, tc=500.0) == (0.5, 2.0)

    def test_move_towards_targets(self):
        trainer = Trainer(small_config(kl_target_per_dim=0.5, tc_target=200.0), STATS)
        beta, lam = trainer.update_coefficients(kl=5.0, tc=0.0)
        assert beta > 1.0
        assert lam < 1.0

    def test_bounds_hold(self):
        trainer = Trainer(small_config(controller_gain=100.0, beta_bounds=[0.01, 2.0]), STATS)
        beta, _ = trainer.update_coefficients(kl=5.0, tc=200.0)
        assert beta == 2.0


class TestHistory:
    """Tests for the per-epoch history table"""

    def test_record_and_best_epoch(self):
        history = TrainingHistory()
        history.record(epoch=1, val_loss=3.0)
        history.record(epoch=2, val_loss=2.0)
        history.record(epoch=3, val_loss=2.5)
        frame = history.to_pandas()
        assert list(frame.columns) == HISTORY_COLUMNS
        assert frame["train_loss"].isna().all()
        assert history.best_epoch() == 2

    def test_unknown_column(self):
        with pytest.raises(KeyError):
            TrainingHistory().record(epoch=1, accuracy=0.9)

    def test_save_and_load(self, tmp_path):
        history = TrainingHistory()
        history.record(epoch=1, train_loss=1.5, beta=0.9)
        history.save(tmp_path / "history.csv")
        loaded = TrainingHistory.load(tmp_path / "history.csv")
        assert len(loaded) == 1
        assert loaded.to_pandas()["beta"].iloc[0] == pytest.approx(0.9)


class TestFit:
    """Tests for the training loop"""

    def test_short_run_produces_checkpoint_and_history(self):
        result = train(small_config(), make_inputs(6, 6), make_inputs(3, 3, seed=1), STATS)
        frame = result.history.to_pandas()
        assert frame["epoch"].tolist() == [1, 2]
        assert np.isfinite(frame[[c for c in HISTORY_COLUMNS if c != "epoch"]].to_numpy()).all()
        assert result.best_epoch in (1, 2)
        training = result.checkpoint.training
        assert training["epochs_run"] == 2
        assert training["best_epoch"] == result.best_epoch
        assert training["best_val_loss"] == pytest.approx(frame["val_loss"].min())
        assert training["train_segments"] == 12
        assert result.checkpoint.norm_stats == STATS

    def test_same_seed_same_checkpoint(self):
        first = train(small_config(), make_inputs(6, 6), make_inputs(3, 3, seed=1), STATS)
        second = train(small_config(), make_inputs(6, 6), make_inputs(3, 3, seed=1), STATS)
        assert first.checkpoint.to_bytes() == second.checkpoint.to_bytes()

    def test_early_stopping_restores_best_parameters(self):
        snapshots = []

        class RisingValidation(Trainer):
            def train_epoch(self, data, sampler):
                terms = super().train_epoch(data, sampler)
                snapshots.append(self.model.state())
                return terms

            def evaluate(self, data, dataset_size):
                loss = float(len(snapshots))
                return {"loss": loss, "mse": loss, "focal": 0.0, "kl": 0.0, "tc": 0.0}

        trainer = RisingValidation(small_config(max_epochs=10, patience=2), STATS)
        result = trainer.fit(make_inputs(6, 6), make_inputs(3, 3, seed=1))
        assert len(result.history) == 3
        assert result.best_epoch == 1
        for name, value in snapshots[0].items():
            np.testing.assert_array_equal(result.checkpoint.params[name], value)

    def test_empty_training_split(self):
        with pytest.raises(DataValidationError):
            train(small_config(), make_inputs(0, 0), make_inputs(3, 3), STATS)

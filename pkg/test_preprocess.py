"""
Tests for resampling, denoising, windowing, normalisation, FFT inputs and splits
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fhrvae.config import PreprocessConfig, SynthConfig
from fhrvae.errors import DataValidationError, InsufficientDataError
from fhrvae.models import FFT_BINS, SEGMENT_SAMPLES, CtgRecord, Group, MaskCode
from fhrvae.preprocess import (
    SPLITS,
    create_segment_processor,
    denoise,
    fft_input,
    fit_norm_stats,
    model_inputs,
    resample_epoch,
    segment_record,
    segment_series,
    split_by_ctg,
    standardize,
    unstandardize,
    window_starts,
)
from fhrvae.synth import generate_corpus


def wavy(n: int, level: float = 140.0, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return level + 5.0 * np.sin(np.arange(n) / 20.0) + rng.normal(0.0, 1.0, n)


class TestResample:
    """Tests for epoch up-sampling"""

    def test_length_and_constant_series(self):
        out = resample_epoch(np.full(8, 132.0))
        assert out.shape == (120,)
        np.testing.assert_allclose(out, 132.0)

    def test_ramp_follows_linear_interpolation(self):
        out = resample_epoch(np.linspace(120.0, 150.0, 10))
        t = np.arange(150)
        expected = 120.0 + (30.0 / 9.0) * np.minimum(t, 135) / 15.0
        np.testing.assert_allclose(out[2:136], expected[2:136], atol=0.5)

    def test_missing_epoch_blanks_its_span(self):
        epochs = np.array([140.0, np.nan, 150.0, 150.0])
        out = resample_epoch(epochs)
        assert np.isnan(out[15:30]).all()
        assert not np.isnan(out[:15]).any()
        assert not np.isnan(out[30:]).any()

    def test_all_missing(self):
        assert np.isnan(resample_epoch(np.full(3, np.nan))).all()

    def test_empty_input_rejected(self):
        with pytest.raises(DataValidationError):
            resample_epoch(np.array([]))


class TestDenoise:
    """Tests for band clipping and spike removal"""

    def test_out_of_band_samples_become_missing(self):
        out = denoise(np.array([140.0, 45.0, 140.0, 215.0, 140.0]))
        assert np.isnan(out[1]) and np.isnan(out[3])
        assert out[0] == 140.0

    def test_single_sample_spike_takes_neighbour_mean(self):
        out = denoise(np.array([140.0, 142.0, 180.0, 144.0, 146.0]))
        assert out[2] == pytest.approx(143.0)

    def test_two_sample_plateau_is_kept(self):
        x = np.array([140.0, 140.0, 180.0, 180.0, 140.0, 140.0])
        np.testing.assert_array_equal(denoise(x), x)


class TestWindows:
    """Tests for window placement"""

    def test_exact_multiple(self):
        assert window_starts(2400) == [(0, 1200), (600, 1200), (1200, 1200)]

    def test_padded_tail(self):
        assert window_starts(2100) == [(0, 1200), (600, 1200), (1200, 900)]

    def test_short_tail_dropped(self):
        assert window_starts(1900) == [(0, 1200), (600, 1200)]

    def test_short_record_with_enough_samples(self):
        assert window_starts(1000) == [(0, 1000)]
        assert window_starts(800) == []

    @given(st.integers(0, 20000))
    @settings(max_examples=100)
    def test_windows_fit_inside_the_record(self, n):
        for start, length in window_starts(n):
            assert start % 600 == 0
            assert start + length <= n
            assert length == 1200 or 900 <= length < 1200


class TestSegmentSeries:
    """Tests for turning a cleaned series into segments"""

    def test_padded_tail_segment(self):
        segments = segment_series("A", wavy(2100), 1)
        assert [s.start_offset for s in segments] == [0.0, 150.0, 300.0]
        tail = segments[-1]
        assert (tail.mask[:900] == MaskCode.VALID).all()
        assert (tail.mask[900:] == MaskCode.PAD).all()
        assert (tail.values[900:] == 0.0).all()
        assert all(s.label == 1 for s in segments)

    def test_too_much_missing_drops_window(self):
        x = wavy(1200)
        x[:301] = np.nan
        assert segment_series("A", x, 0) == []
        x = wavy(1200)
        x[:300] = np.nan
        only = segment_series("A", x, 0)
        assert len(only) == 1
        assert (only[0].mask == MaskCode.MISSING).sum() == 300
        assert (only[0].values[:300] == 0.0).all()

    def test_flat_line_dropped(self):
        assert segment_series("A", np.full(1200, 140.0), 0) == []

    def test_record_must_be_4hz(self):
        record = CtgRecord(ctg_id="L", group=Group.NPO, gestational_age=30.0, sample_rate=1 / 3.75,
                           fhr=[140.0] * 200)
        with pytest.raises(DataValidationError):
            segment_record(record)


class TestNormalisation:
    """Tests for fitting and applying normalisation statistics"""

    def test_population_statistics_over_valid_positions(self):
        values = np.array([[1.0, 3.0, 99.0]])
        mask = np.array([[MaskCode.VALID, MaskCode.VALID, MaskCode.MISSING]])
        stats = fit_norm_stats(values, mask)
        assert stats.mean == pytest.approx(2.0)
        assert stats.sd == pytest.approx(1.0)

    def test_standardize_keeps_mask_and_zeroes_others(self):
        values = np.array([1.0, 3.0, 99.0])
        mask = np.array([MaskCode.VALID, MaskCode.VALID, MaskCode.PAD])
        stats = fit_norm_stats(values, mask)
        out, out_mask = standardize(values, mask, stats)
        np.testing.assert_allclose(out, [-1.0, 1.0, 0.0])
        np.testing.assert_array_equal(out_mask, mask)
        np.testing.assert_allclose(unstandardize(out[:2], stats), [1.0, 3.0])

    def test_errors(self):
        with pytest.raises(InsufficientDataError):
            fit_norm_stats(np.ones(3), np.full(3, MaskCode.MISSING))
        with pytest.raises(DataValidationError):
            fit_norm_stats(np.ones(3), np.zeros(3, dtype=np.int8))


class TestFftInput:
    """Tests for the scaled magnitude spectrum"""

    def test_range_and_scale(self):
        x = wavy(SEGMENT_SAMPLES)
        out = fft_input(x, np.zeros(SEGMENT_SAMPLES, dtype=np.int8))
        assert out.shape == (FFT_BINS,)
        assert out.min() >= 0.0
        assert out.max() <= 1.0
        assert out[1:].max() == pytest.approx(1.0)

    def test_constant_offset_only_moves_dc(self):
        x = wavy(SEGMENT_SAMPLES)
        mask = np.zeros(SEGMENT_SAMPLES, dtype=np.int8)
        np.testing.assert_allclose(fft_input(x, mask)[1:], fft_input(x + 20.0, mask)[1:], atol=1e-9)

    def test_flat_signal(self):
        out = fft_input(np.full(SEGMENT_SAMPLES, 140.0), np.zeros(SEGMENT_SAMPLES, dtype=np.int8))
        assert out[0] == 1.0
        assert (out[1:] == 0.0).all()

    def test_slow_sinusoid_peaks_at_its_bin(self):
        """0.1 Hz over 300 s is 30 cycles, so the peak sits at bin 30"""
        t = np.arange(SEGMENT_SAMPLES) / 4.0
        out = fft_input(140.0 + 5.0 * np.sin(2 * np.pi * 0.1 * t), np.zeros(SEGMENT_SAMPLES, dtype=np.int8))
        assert int(np.argmax(out)) == 30
        assert out[30] == pytest.approx(1.0)
        assert 0.5 < out[0] < 1.0

    def test_dc_bin_tracks_the_mean_level(self):
        mask = np.zeros(SEGMENT_SAMPLES, dtype=np.int8)
        x = wavy(SEGMENT_SAMPLES, level=0.0)
        assert fft_input(x + 60.0, mask)[0] < fft_input(x + 140.0, mask)[0] < 1.0

    def test_gaps_filled_with_valid_mean(self):
        x = wavy(SEGMENT_SAMPLES)
        mask = np.zeros(SEGMENT_SAMPLES, dtype=np.int8)
        mask[1000:] = MaskCode.PAD
        garbage = x.copy()
        garbage[1000:] = 0.0
        np.testing.assert_array_equal(fft_input(x, mask), fft_input(garbage, mask))


class TestSplits:
    """Tests for CTG-level stratified splitting"""

    def ids_and_labels(self, n_npo=12, n_apo=12, per_record=3):
        ids, labels = [], []
        for i in range(n_npo + n_apo):
            ids += [f"CTG-{i:03d}"] * per_record
            labels += [int(i >= n_npo)] * per_record
        return ids, labels

    def test_disjoint_complete_and_stratified(self):
        ids, labels = self.ids_and_labels()
        splits = split_by_ctg(ids, labels, seed=4)
        assigned = [c for split in SPLITS for c in splits[split]]
        assert sorted(assigned) == sorted(set(ids))
        assert len(assigned) == len(set(assigned))
        label_of = dict(zip(ids, labels))
        for split in SPLITS:
            assert {label_of[c] for c in splits[split]} == {0, 1}

    def test_deterministic_per_seed(self):
        ids, labels = self.ids_and_labels()
        assert split_by_ctg(ids, labels, seed=1) == split_by_ctg(ids, labels, seed=1)

    def test_empty_split_is_filled(self):
        splits = split_by_ctg(["a", "b", "c"], [0, 0, 0], validation_fraction=0.01, test_fraction=0.01)
        assert all(len(splits[s]) >= 1 for s in SPLITS)

    def test_six_equal_records_split_four_one_one(self):
        ids, labels = self.ids_and_labels(n_npo=3, n_apo=3, per_record=4)
        for seed in range(5):
            splits = split_by_ctg(ids, labels, seed=seed)
            assert [len(splits[s]) for s in ("train", "validation", "test")] == [4, 1, 1]

    def test_large_corpus_is_stratified(self):
        rng = np.random.default_rng(8)
        ids, labels = [], []
        for i in range(600):
            size = int(rng.integers(3, 11))
            ids += [f"CTG-{i:04d}"] * size
            labels += [int(i % 5 < 2)] * size
        splits = split_by_ctg(ids, labels, seed=3)
        ids_arr, labels_arr = np.array(ids), np.array(labels)
        overall = labels_arr.mean()
        for split in SPLITS:
            rows = np.isin(ids_arr, splits[split])
            assert abs(labels_arr[rows].mean() - overall) <= 0.02, split
            if split != "train":
                assert rows.mean() == pytest.approx(1.0 / 6.0, abs=0.01)

    def test_train_is_never_left_empty(self):
        splits = split_by_ctg(["a", "b", "c"], [0, 1, 0], validation_fraction=0.49, test_fraction=0.49)
        assert all(len(splits[s]) == 1 for s in SPLITS)

    def test_needs_three_records(self):
        with pytest.raises(DataValidationError):
            split_by_ctg(["a", "a", "b"], [0, 0, 1])

    def test_mixed_labels_within_record(self):
        with pytest.raises(DataValidationError):
            split_by_ctg(["a", "a", "b", "c"], [0, 1, 0, 1])


def test_prepare_small_corpus():
    """Whole chain on a generated corpus: splits cover records, stats come from train"""
    records = generate_corpus(SynthConfig(n_npo_records=6, n_apo_records=6, record_minutes=10.0, seed=2))
    processor = create_segment_processor(PreprocessConfig(split_seed=1))
    prepared = processor.prepare(records)
    segments = prepared.segments
    assert len(segments) > 0
    assert set(segments.record_ids()) == {c for s in SPLITS for c in prepared.splits[s]}
    train = segments.select_records(prepared.splits["train"])
    expected = fit_norm_stats(train.values, train.mask)
    assert prepared.norm_stats.mean == pytest.approx(expected.mean)

    std, mask, fft = model_inputs(segments, prepared.norm_stats)
    assert std.shape == (len(segments), SEGMENT_SAMPLES)
    assert fft.shape == (len(segments), FFT_BINS)
    assert (std[mask != MaskCode.VALID] == 0.0).all()
    assert processor.process_corpus(records, threads=2).start_offsets.tolist() == segments.start_offsets.tolist()

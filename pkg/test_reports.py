"""
Tests for trace reports, reconstruction error and HTML rendering
"""

import math

import numpy as np
import pandas as pd
import pytest

from fhrvae.errors import DataValidationError
from fhrvae.models import SEGMENT_SAMPLES, FhrSegment, MaskCode, NormStats, SegmentSet
from fhrvae.reports import (
    create_report_renderer,
    masked_mse,
    segment_lengths,
    segment_scores_frame,
    trace_report,
    traversal_frame,
)

STATS = NormStats(mean=140.0, sd=10.0)


def two_segment_trace(threshold=0.5):
    recon = np.vstack([np.full(SEGMENT_SAMPLES, 130.0), np.full(SEGMENT_SAMPLES, 150.0)])
    return trace_report(
        "CTG-000001",
        np.full(2400, 141.0),
        start_offsets=[0.0, 150.0],
        lengths=[1200, 1200],
        scores=[0.4, 0.6],
        reconstructions=recon,
        threshold=threshold,
    )


class TestTraceReport:
    """Tests for per-interval scores and the reconstruction overlay"""

    def test_interval_means_and_categories(self):
        intervals = two_segment_trace().intervals
        assert list(intervals["n_segments"]) == [1, 2, 1, 0]
        assert intervals["mean_score"].iloc[:3].tolist() == pytest.approx([0.4, 0.5, 0.6])
        assert math.isnan(intervals["mean_score"].iloc[3])
        assert list(intervals["category"]) == ["below", "near", "above", "absent"]
        assert list(intervals["start_seconds"]) == [0.0, 150.0, 300.0, 450.0]

    def test_overlay_averages_covering_segments(self):
        signal = two_segment_trace().signal
        recon = signal["reconstruction"].to_numpy()
        np.testing.assert_allclose(recon[:600], 130.0)
        np.testing.assert_allclose(recon[600:1200], 140.0)
        np.testing.assert_allclose(recon[1200:1800], 150.0)
        assert np.isnan(recon[1800:]).all()
        assert (signal["fhr"] == 141.0).all()

    def test_matches_brute_force_overlap(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(2100, 6000))
            starts = sorted(rng.choice(np.arange(0, n - 900, 600), size=2, replace=False).tolist())
            lengths = [min(1200, n - s) for s in starts]
            scores = rng.uniform(size=2)
            report = trace_report(
                "X", np.full(n, 140.0), [s / 4.0 for s in starts], lengths, scores,
                np.full((2, SEGMENT_SAMPLES), 140.0), 0.5,
            )
            for row in report.intervals.itertuples():
                low, high = row.interval * 600, min((row.interval + 1) * 600, n)
                covering = [
                    scores[i] for i in range(2)
                    if any(low <= t < high for t in range(starts[i], starts[i] + lengths[i]))
                ]
                if covering:
                    assert row.mean_score == pytest.approx(np.mean(covering))
                else:
                    assert row.category == "absent"


def test_masked_mse_uses_valid_positions_in_bpm():
    std = np.ones((1, SEGMENT_SAMPLES))
    mask = np.zeros((1, SEGMENT_SAMPLES), dtype=np.int8)
    mask[0, :100] = MaskCode.MISSING
    recon = np.zeros((1, SEGMENT_SAMPLES))
    recon[0, :100] = 50.0
    assert masked_mse(recon, std, mask, STATS) == pytest.approx(100.0)
    with pytest.raises(DataValidationError):
        masked_mse(recon, std, np.full_like(mask, MaskCode.PAD), STATS)


def test_segment_tables():
    mask = np.zeros(SEGMENT_SAMPLES, dtype=np.int8)
    mask[1000:] = MaskCode.PAD
    segments = SegmentSet.from_segments(
        [
            FhrSegment("B", 0.0, np.full(SEGMENT_SAMPLES, 140.0), np.zeros(SEGMENT_SAMPLES, dtype=np.int8), 1),
            FhrSegment("A", 150.0, np.where(mask == 0, 140.0, 0.0), mask, 0),
        ]
    )
    frame = segment_scores_frame(segments, np.array([0.2, 0.7]))
    assert list(frame.columns) == ["ctg_id", "start_offset", "label", "score"]
    assert list(frame["ctg_id"]) == ["A", "B"]
    assert segment_lengths(segments).tolist() == [1000, 1200]


def test_traversal_frame_columns():
    frame = traversal_frame([-1.0, 0.0, 1.0], np.zeros((3, SEGMENT_SAMPLES)))
    assert list(frame.columns) == ["time_seconds", "m=-1", "m=+0", "m=+1"]
    assert len(frame) == SEGMENT_SAMPLES


class TestRenderer:
    """Tests for plotly HTML output"""

    def test_render_directory(self, tmp_path):
        pd.DataFrame({"threshold": [np.inf, 0.5, 0.1], "fpr": [0.0, 0.5, 1.0], "tpr": [0.0, 1.0, 1.0]}).to_csv(
            tmp_path / "roc_segment.csv", index=False
        )
        pd.DataFrame({"bin_low": [0.0, 0.5], "bin_high": [0.5, 1.0], "npo_count": [3, 1], "apo_count": [1, 3]}).to_csv(
            tmp_path / "score_histogram_segment.csv", index=False
        )
        report = two_segment_trace()
        intervals = report.intervals.copy()
        intervals.insert(0, "ctg_id", report.ctg_id)
        intervals.to_csv(tmp_path / "trace.csv", index=False)
        report.signal.to_csv(tmp_path / "trace_signal.csv", index=False)
        traversal_frame([-1.0, 1.0], np.zeros((2, SEGMENT_SAMPLES))).to_csv(
            tmp_path / "traversal_dimension_0.csv", index=False
        )

        written = create_report_renderer().render_directory(tmp_path)
        names = sorted(p.name for p in written)
        assert names == ["roc.html", "score_histogram_segment.html", "trace.html", "traversal_dimension_0.html"]
        assert all(p.read_text(encoding="utf-8").lstrip().lower().startswith("<html") for p in written)

    def test_rendering_is_deterministic(self, tmp_path):
        renderer = create_report_renderer()
        curve = pd.DataFrame({"fpr": [0.0, 1.0], "tpr": [0.0, 1.0]})
        first = renderer.render_roc({"segment": curve}, tmp_path / "a.html").read_bytes()
        second = renderer.render_roc({"segment": curve}, tmp_path / "b.html").read_bytes()
        assert first == second

"""
Evaluation report tables and optional HTML figures
Trace reports, reconstruction error, ROC/histogram tables and plotly rendering
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from .errors import DataValidationError
from .formats import atomic_write_bytes
from .models import SEGMENT_SAMPLES, SEGMENT_STRIDE, MaskCode, NormStats, SegmentSet
from .preprocess import unstandardize

logger = logging.getLogger(__name__)

INTERVAL_SAMPLES = SEGMENT_STRIDE


def segment_scores_frame(segments: SegmentSet, scores: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "ctg_id": [str(p) for p in segments.parent_ids],
            "start_offset": segments.start_offsets,
            "label": segments.labels.astype(int),
            "score": np.asarray(scores, dtype=np.float64),
        }
    )


def masked_mse(reconstruction: np.ndarray, std_values: np.ndarray, mask: np.ndarray, stats: NormStats) -> float:
    """Mean squared reconstruction error over VALID samples, in bpm²."""
    valid = np.asarray(mask) == MaskCode.VALID
    if not valid.any():
        raise DataValidationError("no VALID samples to score the reconstruction on")
    residual = (np.asarray(reconstruction, dtype=np.float64) - std_values)[valid]
    return float(np.mean(residual * residual) * stats.sd * stats.sd)


@dataclass
class TraceReport:
    ctg_id: str
    intervals: pd.DataFrame
    signal: pd.DataFrame


def _category(value: float, threshold: float, band: float) -> str:
    if math.isnan(value):
        return "absent"
    if value >= threshold + band:
        return "above"
    if value <= threshold - band:
        return "below"
    return "near"


def trace_report(
    ctg_id: str,
    series: np.ndarray,
    start_offsets: Sequence[float],
    lengths: Sequence[int],
    scores: Sequence[float],
    reconstructions: np.ndarray,
    threshold: float,
    band: float = 0.05,
) -> TraceReport:
    """
    Mean score of every segment overlapping each 2.5-minute interval, plus the
    cleaned signal with the averaged reconstruction of all covering segments.

    `lengths` is each segment's non-PAD sample count; `reconstructions` are in bpm.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    starts = np.round(np.asarray(start_offsets, dtype=np.float64) * 4.0).astype(int)
    stops = starts + np.asarray(lengths, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)

    n_intervals = math.ceil(n / INTERVAL_SAMPLES)
    rows = []
    for k in range(n_intervals):
        low, high = k * INTERVAL_SAMPLES, min((k + 1) * INTERVAL_SAMPLES, n)
        overlapping = (np.minimum(stops, high) - np.maximum(starts, low)) > 0
        mean = float(scores[overlapping].mean()) if overlapping.any() else math.nan
        rows.append(
            {
                "interval": k,
                "start_seconds": low / 4.0,
                "end_seconds": high / 4.0,
                "n_segments": int(overlapping.sum()),
                "mean_score": mean,
                "category": _category(mean, threshold, band),
            }
        )

    total = np.zeros(n)
    count = np.zeros(n)
    for start, stop, recon in zip(starts, stops, np.atleast_2d(reconstructions)):
        stop = min(stop, n)
        total[start:stop] += recon[: stop - start]
        count[start:stop] += 1
    overlay = np.divide(total, count, out=np.full(n, np.nan), where=count > 0)
    signal = pd.DataFrame(
        {"sample": np.arange(n), "time_seconds": np.arange(n) / 4.0, "fhr": x, "reconstruction": overlay}
    )
    absent = sum(1 for r in rows if r["category"] == "absent")
    logger.info(f"Trace for {ctg_id}: {n_intervals} intervals, {absent} without a valid segment")
    return TraceReport(ctg_id=ctg_id, intervals=pd.DataFrame(rows), signal=signal)


def segment_lengths(segments: SegmentSet) -> np.ndarray:
    return (segments.mask != MaskCode.PAD).sum(axis=1).astype(int)


def reconstructions_bpm(reconstruction: np.ndarray, stats: NormStats) -> np.ndarray:
    return unstandardize(reconstruction, stats)


def traversal_frame(multipliers: Sequence[float], signals: np.ndarray) -> pd.DataFrame:
    """One row per sample, one column per multiplier."""
    frame = pd.DataFrame({"time_seconds": np.arange(SEGMENT_SAMPLES) / 4.0})
    for m, family in zip(multipliers, signals):
        frame[f"m={m:+g}"] = family
    return frame


class ReportRenderer:
    """
    Renders evaluation and interpretation tables as standalone plotly HTML
    """

    def __init__(self, include_plotlyjs: str = "cdn"):
        self.include_plotlyjs = include_plotlyjs

    def _write(self, figure: go.Figure, path: Path, div_id: str) -> Path:
        html = figure.to_html(full_html=True, include_plotlyjs=self.include_plotlyjs, div_id=div_id)
        atomic_write_bytes(path, html.encode("utf-8"))
        return path

    def render_roc(self, curves: Mapping[str, pd.DataFrame], path: Path, title: str = "ROC") -> Path:
        figure = go.Figure()
        for name, curve in curves.items():
            figure.add_trace(go.Scatter(x=curve["fpr"], y=curve["tpr"], mode="lines", name=name))
        figure.add_trace(go.Scatter(x=[0, 1], y=[0, 1], mode="lines", name="chance", line={"dash": "dot"}))
        figure.update_layout(title=title, xaxis_title="False positive rate", yaxis_title="True positive rate")
        return self._write(figure, path, "roc")

    def render_histogram(self, histogram: pd.DataFrame, path: Path, title: str = "Scores") -> Path:
        centres = (histogram["bin_low"] + histogram["bin_high"]) / 2.0
        figure = go.Figure()
        for column in [c for c in histogram.columns if c.endswith("_count")]:
            figure.add_trace(go.Bar(x=centres, y=histogram[column], name=column.split("_")[0].upper()))
        figure.update_layout(title=title, barmode="overlay", xaxis_title="Score", yaxis_title="Segments")
        figure.update_traces(opacity=0.6)
        return self._write(figure, path, "histogram")

    def render_trace(self, report: TraceReport, path: Path) -> Path:
        figure = go.Figure()
        figure.add_trace(go.Scatter(x=report.signal["time_seconds"], y=report.signal["fhr"], name="FHR"))
        figure.add_trace(
            go.Scatter(x=report.signal["time_seconds"], y=report.signal["reconstruction"], name="Reconstruction")
        )
        present = report.intervals.dropna(subset=["mean_score"])
        figure.add_trace(
            go.Bar(
                x=(present["start_seconds"] + present["end_seconds"]) / 2.0,
                y=present["mean_score"],
                name="Mean score",
                yaxis="y2",
                opacity=0.3,
            )
        )
        figure.update_layout(
            title=f"Trace {report.ctg_id}",
            xaxis_title="Time (s)",
            yaxis={"title": "bpm"},
            yaxis2={"title": "score", "overlaying": "y", "side": "right", "range": [0, 1]},
        )
        return self._write(figure, path, "trace")

    def render_traversal(self, frame: pd.DataFrame, path: Path, title: str) -> Path:
        figure = go.Figure()
        for column in frame.columns[1:]:
            figure.add_trace(go.Scatter(x=frame["time_seconds"], y=frame[column], mode="lines", name=column))
        figure.update_layout(title=title, xaxis_title="Time (s)", yaxis_title="bpm")
        return self._write(figure, path, "traversal")

    def render_directory(self, directory: Path) -> List[Path]:
        """Render every recognised CSV in an output directory next to itself."""
        directory = Path(directory)
        written: List[Path] = []
        roc: Dict[str, pd.DataFrame] = {}
        for name in ("roc_segment", "roc_case"):
            if (directory / f"{name}.csv").exists():
                roc[name.split("_")[1]] = pd.read_csv(directory / f"{name}.csv")
        if roc:
            written.append(self.render_roc(roc, directory / "roc.html"))
        for csv in sorted(directory.glob("score_histogram_*.csv")):
            written.append(self.render_histogram(pd.read_csv(csv), csv.with_suffix(".html"), csv.stem))
        for csv in sorted(directory.glob("traversal_*.csv")) + sorted(directory.glob("*_traversal_*.csv")):
            written.append(self.render_traversal(pd.read_csv(csv), csv.with_suffix(".html"), csv.stem))
        if (directory / "trace.csv").exists() and (directory / "trace_signal.csv").exists():
            intervals = pd.read_csv(directory / "trace.csv")
            signal = pd.read_csv(directory / "trace_signal.csv")
            ctg_id = str(intervals["ctg_id"].iloc[0]) if "ctg_id" in intervals and len(intervals) else "trace"
            written.append(self.render_trace(TraceReport(ctg_id, intervals, signal), directory / "trace.html"))
        logger.info(f"Rendered {len(written)} figures in {directory}")
        return written


def create_report_renderer(include_plotlyjs: str = "cdn") -> ReportRenderer:
    """Create report renderer instance"""
    return ReportRenderer(include_plotlyjs)

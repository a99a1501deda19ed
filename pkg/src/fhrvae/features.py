"""
Clinical FHR features per segment
Baseline, baseline shift and anomaly, STV, LTV, SD, range and event counts
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config import FeatureConfig
from .errors import InsufficientDataError
from .models import (
    EPOCH_SECONDS,
    FEATURE_NAMES,
    SAMPLE_RATE_HZ,
    FeatureVector,
    FhrSegment,
    MaskCode,
    SegmentSet,
)

logger = logging.getLogger(__name__)

REFERENCE_BASELINE_BPM = 140.0
EPOCH_SAMPLES = int(round(EPOCH_SECONDS * SAMPLE_RATE_HZ))
EPOCHS_PER_MINUTE = int(round(60.0 / EPOCH_SECONDS))
MIN_VARIABILITY_MINUTES = 4


def _seconds(value: float) -> int:
    return int(round(value * SAMPLE_RATE_HZ))


def _valid(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask) == MaskCode.VALID


def _trimmed_level(values: np.ndarray, valid: np.ndarray, window: int, trim: float) -> float:
    """Running median, then the mean of VALID samples lying within `trim` of it."""
    series = pd.Series(np.where(valid, values, np.nan))
    running = series.rolling(window, center=True, min_periods=1).median().to_numpy()
    with np.errstate(invalid="ignore"):
        near = valid & (np.abs(values - running) <= trim)
    if not near.any():
        return float(np.median(values[valid]))
    return float(values[near].mean())


def baseline(values: np.ndarray, mask: np.ndarray, config: Optional[FeatureConfig] = None) -> float:
    config = config or FeatureConfig()
    window = _seconds(config.baseline_window_seconds)
    valid = _valid(mask)
    if int(valid.sum()) < window:
        raise InsufficientDataError(f"baseline needs {window} VALID samples, found {int(valid.sum())}")
    return _trimmed_level(np.asarray(values, dtype=np.float64), valid, window, config.baseline_trim_bpm)


def baseline_shift(values: np.ndarray, mask: np.ndarray, config: Optional[FeatureConfig] = None) -> float:
    """Baseline over the final window minus baseline over the first (PAD tail excluded)."""
    config = config or FeatureConfig()
    window = _seconds(config.baseline_window_seconds)
    x = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask)
    end = int((mask != MaskCode.PAD).sum())
    if end < window:
        raise InsufficientDataError("baseline_shift needs at least one full window of signal")
    levels = []
    for part in (slice(0, window), slice(end - window, end)):
        valid = _valid(mask[part])
        if int(valid.sum()) * 2 < window:
            raise InsufficientDataError("baseline_shift: an end window is mostly missing")
        levels.append(_trimmed_level(x[part], valid, window, config.baseline_trim_bpm))
    return levels[1] - levels[0]


def _epochs(values: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Epoch means plus per-epoch 'mostly valid' and 'fully valid' flags."""
    n_epochs = values.shape[0] // EPOCH_SAMPLES
    shaped = values[: n_epochs * EPOCH_SAMPLES].reshape(n_epochs, EPOCH_SAMPLES)
    valid = _valid(mask[: n_epochs * EPOCH_SAMPLES]).reshape(n_epochs, EPOCH_SAMPLES)
    counts = valid.sum(axis=1)
    sums = np.where(valid, shaped, 0.0).sum(axis=1)
    means = np.divide(sums, counts, out=np.zeros(n_epochs), where=counts > 0)
    return means, counts * 2 > EPOCH_SAMPLES, counts == EPOCH_SAMPLES


def _usable_minutes(majority: np.ndarray) -> np.ndarray:
    n_minutes = majority.shape[0] // EPOCHS_PER_MINUTE
    per_minute = majority[: n_minutes * EPOCHS_PER_MINUTE].reshape(n_minutes, EPOCHS_PER_MINUTE)
    usable = per_minute.all(axis=1)
    if int(usable.sum()) < MIN_VARIABILITY_MINUTES:
        raise InsufficientDataError(
            f"variability needs {MIN_VARIABILITY_MINUTES} minutes of mostly-valid epochs, found {int(usable.sum())}"
        )
    return usable


def stv(values: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute difference between successive 3.75 s epoch means."""
    x = np.asarray(values, dtype=np.float64)
    means, majority, complete = _epochs(x, np.asarray(mask))
    _usable_minutes(majority)
    pairs = complete[1:] & complete[:-1]
    if not pairs.any():
        raise InsufficientDataError("stv: no pair of adjacent fully valid epochs")
    return float(np.abs(np.diff(means))[pairs].mean())


def ltv(values: np.ndarray, mask: np.ndarray) -> float:
    """Mean over usable minutes of the epoch-mean range within the minute."""
    x = np.asarray(values, dtype=np.float64)
    means, majority, _ = _epochs(x, np.asarray(mask))
    usable = _usable_minutes(majority)
    per_minute = means[: usable.shape[0] * EPOCHS_PER_MINUTE].reshape(-1, EPOCHS_PER_MINUTE)
    return float(np.ptp(per_minute[usable], axis=1).mean())


def sd_range(values: np.ndarray, mask: np.ndarray) -> Tuple[float, float]:
    valid = _valid(mask)
    if not valid.any():
        raise InsufficientDataError("sd_range: no VALID samples")
    present = np.asarray(values, dtype=np.float64)[valid]
    return float(present.std()), float(np.ptp(present))


def _runs(flags: np.ndarray) -> List[Tuple[int, int]]:
    """[start, stop) of each run of True."""
    padded = np.concatenate([[False], flags, [False]]).astype(np.int8)
    edges = np.diff(padded)
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def _count_runs(flags: np.ndarray, merge_gap: int, min_length: int) -> int:
    merged: List[List[int]] = []
    for start, stop in _runs(flags):
        if merged and start - merged[-1][1] < merge_gap:
            merged[-1][1] = stop
        else:
            merged.append([start, stop])
    return sum(1 for start, stop in merged if stop - start >= min_length)


def count_events(
    values: np.ndarray, mask: np.ndarray, level: float, config: Optional[FeatureConfig] = None
) -> Tuple[int, int]:
    """Accelerations and decelerations: sustained excursions past baseline ± threshold."""
    config = config or FeatureConfig()
    x = np.asarray(values, dtype=np.float64)
    valid = _valid(mask)
    merge_gap = _seconds(config.event_merge_seconds)
    min_length = _seconds(config.event_min_seconds)
    above = valid & (x >= level + config.event_threshold_bpm)
    below = valid & (x <= level - config.event_threshold_bpm)
    return _count_runs(above, merge_gap, min_length), _count_runs(below, merge_gap, min_length)


def extract_features(segment: FhrSegment, config: Optional[FeatureConfig] = None) -> FeatureVector:
    config = config or FeatureConfig()
    values, mask = segment.values, segment.mask
    level = baseline(values, mask, config)
    sd, spread = sd_range(values, mask)
    accels, decels = count_events(values, mask, level, config)
    return FeatureVector(
        baseline=level,
        baseline_shift=baseline_shift(values, mask, config),
        baseline_anomaly=level - REFERENCE_BASELINE_BPM,
        stv=stv(values, mask),
        ltv=ltv(values, mask),
        sd=sd,
        range=spread,
        accel_count=accels,
        decel_count=decels,
    )


def feature_frame(
    segments: SegmentSet, config: Optional[FeatureConfig] = None, threads: int = 1
) -> pd.DataFrame:
    """
    One row per segment keyed by (ctg_id, start_offset).

    Segments without enough valid data keep their key and get NaN features.
    """
    config = config or FeatureConfig()

    def row(index: int) -> Dict[str, float]:
        try:
            return extract_features(segments.segment(index), config).model_dump()
        except InsufficientDataError:
            return {name: np.nan for name in FEATURE_NAMES}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(len(segments))))
    else:
        rows = [row(i) for i in range(len(segments))]

    frame = pd.DataFrame(rows, columns=FEATURE_NAMES)
    frame.insert(0, "start_offset", segments.start_offsets)
    frame.insert(0, "ctg_id", [str(p) for p in segments.parent_ids])
    frame["label"] = segments.labels.astype(int)
    incomplete = int(frame[FEATURE_NAMES].isna().any(axis=1).sum())
    if incomplete:
        logger.warning(f"{incomplete} of {len(frame)} segments lack data for some features")
    logger.info(f"Computed features for {len(frame)} segments")
    return frame

"""
Preprocessing: raw CTG records to model-ready 5-minute segments
Resampling, denoising, windowing, normalisation, FFT inputs and CTG-level splits
"""

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import PreprocessConfig
from .errors import DataValidationError, InsufficientDataError
from .models import (
    EPOCH_SECONDS,
    FFT_BINS,
    SAMPLE_RATE_HZ,
    SEGMENT_SAMPLES,
    SEGMENT_STRIDE,
    CtgRecord,
    FhrSegment,
    MaskCode,
    NormStats,
    RecordInfo,
    SegmentSet,
)

logger = logging.getLogger(__name__)

UPSAMPLE_FACTOR = int(round(EPOCH_SECONDS * SAMPLE_RATE_HZ))
SPLITS = ("train", "validation", "test")


def resample_epoch(samples: np.ndarray, smoothing_window: int = 5) -> np.ndarray:
    """
    Up-sample a 3.75 s epoch series to 4 Hz.

    Valid epochs are placed at every 15th output sample and linearly
    interpolated, then smoothed with a centred moving average. Each missing
    epoch (NaN) blanks its own 15-sample span of the output.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DataValidationError("resample_epoch needs a non-empty 1-d series")
    n_out = x.size * UPSAMPLE_FACTOR
    present = ~np.isnan(x)
    if not present.any():
        return np.full(n_out, np.nan)
    positions = np.arange(x.size) * UPSAMPLE_FACTOR
    grid = np.arange(n_out)
    interpolated = np.interp(grid, positions[present], x[present])
    smoothed = (
        pd.Series(interpolated)
        .rolling(smoothing_window, center=True, min_periods=1)
        .mean()
        .to_numpy()
    )
    missing_span = np.repeat(~present, UPSAMPLE_FACTOR)
    smoothed[missing_span] = np.nan
    return smoothed


def denoise(
    series: np.ndarray,
    band_low: float = 50.0,
    band_high: float = 210.0,
    spike_delta: float = 25.0,
) -> np.ndarray:
    """Out-of-band samples become NaN; isolated single-sample spikes take their neighbours' mean."""
    x = np.array(series, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        x[(x < band_low) | (x > band_high)] = np.nan
    if x.size < 3:
        return x
    left, mid, right = x[:-2], x[1:-1], x[2:]
    with np.errstate(invalid="ignore"):
        spike = (np.abs(mid - left) > spike_delta) & (np.abs(mid - right) > spike_delta)
    out = x.copy()
    out[1:-1][spike] = 0.5 * (left[spike] + right[spike])
    return out


def window_starts(n: int, min_trailing: int = 900) -> List[Tuple[int, int]]:
    """(start, length) of each window: full windows at stride 600, then at most one padded tail."""
    windows = []
    start = 0
    while start + SEGMENT_SAMPLES <= n:
        windows.append((start, SEGMENT_SAMPLES))
        start += SEGMENT_STRIDE
    remaining = n - start
    if min_trailing <= remaining < SEGMENT_SAMPLES:
        windows.append((start, remaining))
    return windows


def segment_series(
    ctg_id: str, series: np.ndarray, label: int, config: Optional[PreprocessConfig] = None
) -> List[FhrSegment]:
    """Window a cleaned 4 Hz series (NaN = missing) into FhrSegments."""
    config = config or PreprocessConfig()
    x = np.asarray(series, dtype=np.float64)
    max_missing = int(config.max_missing_fraction * SEGMENT_SAMPLES)
    segments: List[FhrSegment] = []
    dropped = 0
    for start, length in window_starts(x.size, config.min_trailing_samples):
        chunk = x[start:start + length]
        mask = np.full(SEGMENT_SAMPLES, MaskCode.PAD, dtype=np.int8)
        mask[:length] = np.where(np.isnan(chunk), MaskCode.MISSING, MaskCode.VALID)
        values = np.zeros(SEGMENT_SAMPLES)
        values[:length] = np.where(np.isnan(chunk), 0.0, chunk)
        valid = mask == MaskCode.VALID
        if int((mask == MaskCode.MISSING).sum()) > max_missing or not valid.any():
            dropped += 1
            continue
        present = values[valid]
        if present.std() < config.min_sd or np.ptp(present) < config.min_range:
            dropped += 1
            continue
        segments.append(
            FhrSegment(
                parent_id=ctg_id,
                start_offset=start / SAMPLE_RATE_HZ,
                values=values,
                mask=mask,
                label=label,
            )
        )
    if dropped:
        logger.debug(f"{ctg_id}: dropped {dropped} windows (missing data or flat line)")
    return segments


def segment_record(record: CtgRecord, config: Optional[PreprocessConfig] = None) -> List[FhrSegment]:
    if abs(record.sample_rate - SAMPLE_RATE_HZ) > 1e-9:
        raise DataValidationError(f"{record.ctg_id}: segment_record needs a 4 Hz record, got {record.sample_rate} Hz")
    return segment_series(record.ctg_id, record.fhr_array(), record.label, config)


def fit_norm_stats(values: np.ndarray, mask: np.ndarray) -> NormStats:
    """Mean and population SD over VALID positions."""
    valid = np.asarray(mask) == MaskCode.VALID
    if not valid.any():
        raise InsufficientDataError("fit_norm_stats: no VALID samples")
    present = np.asarray(values, dtype=np.float64)[valid]
    sd = float(present.std())
    if sd <= 0.0:
        raise DataValidationError("fit_norm_stats: VALID samples have zero spread")
    return NormStats(mean=float(present.mean()), sd=sd)


def standardize(values: np.ndarray, mask: np.ndarray, stats: NormStats) -> Tuple[np.ndarray, np.ndarray]:
    """VALID positions to z-scores; others hold 0.0 and keep their mask code."""
    mask = np.asarray(mask)
    valid = mask == MaskCode.VALID
    out = np.where(valid, (np.asarray(values, dtype=np.float64) - stats.mean) / stats.sd, 0.0)
    return out, mask.copy()


def unstandardize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.sd + stats.mean


def fft_input(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    601-bin magnitude spectrum scaled to [0, 1].

    MISSING/PAD positions are filled with the segment's valid mean first. Bins
    1..600 are divided by the largest of them, so a constant offset leaves them
    unchanged. The DC bin is dc / (dc + that peak): the share of the mean level
    against the strongest oscillation. It is 1.0 only for a flat signal and
    stays below 1 otherwise.
    """
    x = np.asarray(values, dtype=np.float64)
    valid = np.asarray(mask) == MaskCode.VALID
    if not valid.any():
        return np.zeros(FFT_BINS)
    filled = np.where(valid, x, x[valid].mean())
    magnitude = np.abs(np.fft.rfft(filled))
    peak = magnitude.max()
    if peak == 0.0:
        return np.zeros(FFT_BINS)
    scale = magnitude[1:].max()
    out = np.zeros(FFT_BINS)
    if scale > 1e-9 * max(peak, 1.0):
        out[1:] = magnitude[1:] / scale
        out[0] = magnitude[0] / (magnitude[0] + scale)
    else:
        out[0] = 1.0
    return out


def split_by_ctg(
    parent_ids: Sequence[str],
    labels: Sequence[int],
    validation_fraction: float = 1.0 / 6.0,
    test_fraction: float = 1.0 / 6.0,
    seed: int = 0,
) -> Dict[str, List[str]]:
    """
    Assign whole recordings to train/validation/test, stratified by label.

    Each label's recordings are shuffled and given a position in (0, 1): the
    midpoint of their segment span within that label. Merging the labels on
    that position interleaves them in proportion, and the merged sequence is
    laid end to end by segment count. A recording falls in the split whose
    share of the corpus contains its midpoint: validation first, then test,
    then train.
    """
    frame = pd.DataFrame({"ctg_id": list(parent_ids), "label": np.asarray(labels, dtype=int)})
    if frame.empty or frame["ctg_id"].nunique() < 3:
        raise DataValidationError("split_by_ctg needs at least 3 distinct ctg_ids")
    per_record = frame.groupby("ctg_id", sort=True)["label"].agg(["first", "nunique", "size"])
    if (per_record["nunique"] > 1).any():
        raise DataValidationError("segments of one ctg_id carry different labels")

    rng = np.random.default_rng(seed)
    ranked: List[Tuple[float, int, str, int]] = []
    for label in sorted(per_record["first"].unique()):
        group = per_record[per_record["first"] == label]
        order = group.index.to_numpy()[rng.permutation(len(group))]
        counts = group.loc[order, "size"].to_numpy(dtype=np.float64)
        positions = (np.cumsum(counts) - counts / 2.0) / counts.sum()
        ranked.extend(
            (float(p), int(label), str(c), int(n)) for p, c, n in zip(positions, order, counts)
        )
    ranked.sort()

    sizes = np.array([n for *_, n in ranked], dtype=np.float64)
    midpoints = (np.cumsum(sizes) - sizes / 2.0) / sizes.sum()
    placement: Dict[str, Tuple[str, float]] = {}
    for (_, _, ctg_id, _), midpoint in zip(ranked, midpoints):
        if midpoint < validation_fraction:
            split = "validation"
        elif midpoint < validation_fraction + test_fraction:
            split = "test"
        else:
            split = "train"
        placement[ctg_id] = (split, float(midpoint))

    per_split = Counter(s for s, _ in placement.values())
    for needed in SPLITS:
        if per_split[needed]:
            continue
        largest = max(SPLITS, key=lambda s: per_split[s])
        donors = sorted((m, c) for c, (s, m) in placement.items() if s == largest)
        midpoint, ctg_id = donors[-1] if needed == "train" else donors[0]
        placement[ctg_id] = (needed, midpoint)
        per_split[largest] -= 1
        per_split[needed] += 1
        logger.warning(f"Split {needed} was empty; moved {ctg_id} into it from {largest}")

    return {split: sorted(c for c, (s, _) in placement.items() if s == split) for split in SPLITS}


@dataclass
class PreparedCorpus:
    segments: SegmentSet
    splits: Dict[str, List[str]]
    norm_stats: NormStats


class SegmentProcessor:
    """Runs the per-record cleaning chain and assembles the split corpus"""

    def __init__(self, config: Optional[PreprocessConfig] = None):
        self.config = config or PreprocessConfig()
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    def clean_record(self, record: CtgRecord) -> np.ndarray:
        series = record.fhr_array()
        if record.is_legacy:
            series = resample_epoch(series, self.config.smoothing_window)
        elif abs(record.sample_rate - SAMPLE_RATE_HZ) > 1e-9:
            raise DataValidationError(f"{record.ctg_id}: unsupported sample rate {record.sample_rate} Hz")
        return denoise(series, self.config.band_low, self.config.band_high, self.config.spike_delta)

    def process_record(self, record: CtgRecord) -> List[FhrSegment]:
        return segment_series(record.ctg_id, self.clean_record(record), record.label, self.config)

    def process_corpus(self, records: Sequence[CtgRecord], threads: int = 1) -> SegmentSet:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_record = list(pool.map(self.process_record, records))
        else:
            per_record = [self.process_record(r) for r in records]
        segments = [s for chunk in per_record for s in chunk]
        info = {
            r.ctg_id: RecordInfo(
                ctg_id=r.ctg_id, group=r.group, conditions=list(r.conditions), gestational_age=r.gestational_age
            )
            for r in records
        }
        kept = {s.parent_id for s in segments}
        self.logger.info(
            f"Segmented {len(records)} records into {len(segments)} segments "
            f"({len(records) - len(kept)} records yielded none)"
        )
        return SegmentSet.from_segments(segments, {k: v for k, v in info.items() if k in kept})

    def prepare(self, records: Sequence[CtgRecord], threads: int = 1) -> PreparedCorpus:
        """Segment, split by CTG and fit normalisation on the training split."""
        segments = self.process_corpus(records, threads)
        if len(segments) == 0:
            raise InsufficientDataError("no segments survived preprocessing")
        splits = split_by_ctg(
            segments.parent_ids.tolist(),
            segments.labels.tolist(),
            self.config.validation_fraction,
            self.config.test_fraction,
            self.config.split_seed,
        )
        train = segments.select_records(splits["train"])
        stats = fit_norm_stats(train.values, train.mask)
        for split in SPLITS:
            part = segments.select_records(splits[split])
            apo = 100.0 * float(part.labels.mean()) if len(part) else 0.0
            self.logger.info(f"{split}: {len(splits[split])} CTGs, {len(part)} segments, {apo:.1f}% APO")
        return PreparedCorpus(segments=segments, splits=splits, norm_stats=stats)


def create_segment_processor(config: Optional[PreprocessConfig] = None) -> SegmentProcessor:
    """Factory function to create a segment processor"""
    return SegmentProcessor(config)


def model_inputs(segments: SegmentSet, stats: NormStats) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standardised values, masks and FFT inputs for every row of a SegmentSet."""
    n = len(segments)
    standardized = np.zeros((n, SEGMENT_SAMPLES))
    spectra = np.zeros((n, FFT_BINS))
    for i in range(n):
        standardized[i], _ = standardize(segments.values[i], segments.mask[i], stats)
        spectra[i] = fft_input(segments.values[i], segments.mask[i])
    return standardized, segments.mask.copy(), spectra

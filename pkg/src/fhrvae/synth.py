"""
Synthetic CTG corpus generator
Labeled FHR recordings whose NPO/APO classes differ in variability,
acceleration rate, decelerations and baseline level
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import signal

from .config import SynthConfig
from .errors import ConfigError, InsufficientDataError
from .models import (
    EPOCH_SECONDS,
    LEGACY_SAMPLE_RATE_HZ,
    SAMPLE_RATE_HZ,
    ConditionTag,
    CorpusSummary,
    CtgRecord,
    Group,
    MaskCode,
    SegmentSet,
)

logger = logging.getLogger(__name__)

EPOCH_SAMPLES = int(round(EPOCH_SECONDS * SAMPLE_RATE_HZ))
AR_COEFFICIENT = 0.9
WANDER_STEP_SD = 0.01
CLIP_LOW_BPM = 60.0
CLIP_HIGH_BPM = 210.0
# Streams 0..n-1 belong to records; this one picks the legacy-rate records.
_CORPUS_STREAM = 2**31


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _event_shape(length: int) -> np.ndarray:
    """Flattened half-sine: smooth onset and offset, plateau in the middle."""
    phase = np.sin(np.pi * (np.arange(length) + 0.5) / length)
    return np.clip(1.5 * phase, 0.0, 1.0)


def _add_events(
    fhr: np.ndarray,
    rng: np.random.Generator,
    rate_per_10min: float,
    amplitude: Sequence[float],
    duration_seconds: Sequence[float],
    sign: float,
) -> None:
    n = fhr.shape[0]
    minutes = n / SAMPLE_RATE_HZ / 60.0
    for _ in range(rng.poisson(rate_per_10min * minutes / 10.0)):
        length = int(rng.uniform(*duration_seconds) * SAMPLE_RATE_HZ)
        start = int(rng.integers(0, max(n - length, 1)))
        height = rng.uniform(*amplitude)
        stop = min(start + length, n)
        fhr[start:stop] += sign * height * _event_shape(length)[: stop - start]


def _draw_conditions(cfg: SynthConfig, rng: np.random.Generator) -> List[ConditionTag]:
    tags = sorted(cfg.condition_mix, key=lambda t: list(ConditionTag).index(t))
    probs = np.array([cfg.condition_mix[t] for t in tags], dtype=np.float64)
    primary = tags[int(rng.choice(len(tags), p=probs / probs.sum()))]
    chosen = {primary}
    for tag, p in zip(tags, probs):
        if tag != primary and rng.random() < cfg.comorbidity_rate * p:
            chosen.add(tag)
    return [t for t in ConditionTag if t in chosen]


def _to_legacy(fhr: np.ndarray) -> np.ndarray:
    """Average 15-sample epochs; an epoch is missing when most of it is."""
    epochs = fhr[: (fhr.shape[0] // EPOCH_SAMPLES) * EPOCH_SAMPLES].reshape(-1, EPOCH_SAMPLES)
    present = ~np.isnan(epochs)
    counts = present.sum(axis=1)
    sums = np.where(present, epochs, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    means[counts * 2 < EPOCH_SAMPLES] = np.nan
    return means


def generate_record(cfg: SynthConfig, index: int, group: Group, legacy: bool) -> CtgRecord:
    """One record from its own (seed, index) stream, independent of every other record."""
    rng = _record_rng(cfg.seed, index)
    n = int(round(cfg.record_minutes * 60.0 * SAMPLE_RATE_HZ))
    t = np.arange(n) / SAMPLE_RATE_HZ
    is_apo = group == Group.APO

    conditions = _draw_conditions(cfg, rng) if is_apo else []
    gestational_age = round(float(rng.uniform(27.0, 36.0)), 1)
    level = rng.normal(cfg.baseline_mean, cfg.baseline_sd) + (cfg.apo_baseline_offset if is_apo else 0.0)

    scale = 1.0
    if is_apo:
        severity = max([cfg.condition_severity.get(tag, 1.0) for tag in conditions] or [1.0])
        scale = rng.uniform(*cfg.apo_variability_scale) / severity

    fhr = np.full(n, level)
    fhr += np.cumsum(rng.normal(0.0, WANDER_STEP_SD, n))
    for _ in range(3):
        amplitude = rng.uniform(*cfg.variability_amplitude) * scale
        period = rng.uniform(15.0, 90.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        fhr += amplitude * np.sin(2.0 * np.pi * t / period + phase)

    innovations = rng.normal(0.0, cfg.noise_sd * math.sqrt(1.0 - AR_COEFFICIENT**2), n)
    innovations[0] /= math.sqrt(1.0 - AR_COEFFICIENT**2)
    fhr += signal.lfilter([1.0], [1.0, -AR_COEFFICIENT], innovations)

    accel_rate = cfg.apo_accel_rate if is_apo else cfg.npo_accel_rate
    _add_events(fhr, rng, accel_rate, (15.0, 30.0), (20.0, 60.0), +1.0)
    if is_apo:
        _add_events(fhr, rng, cfg.apo_decel_rate, (15.0, 40.0), (20.0, 90.0), -1.0)

    minutes = cfg.record_minutes
    for _ in range(rng.poisson(cfg.spike_rate * minutes / 10.0)):
        position = int(rng.integers(1, n - 1))
        fhr[position] += rng.choice([-1.0, 1.0]) * rng.uniform(30.0, 50.0)

    fhr = np.clip(fhr, CLIP_LOW_BPM, CLIP_HIGH_BPM)
    for _ in range(rng.poisson(cfg.missing_burst_rate * minutes / 10.0)):
        length = int(rng.uniform(5.0, 60.0) * SAMPLE_RATE_HZ)
        start = int(rng.integers(0, max(n - length, 1)))
        fhr[start:start + length] = np.nan

    sample_rate = SAMPLE_RATE_HZ
    if legacy:
        fhr = _to_legacy(fhr)
        sample_rate = LEGACY_SAMPLE_RATE_HZ
    fhr = np.round(fhr, 2)

    return CtgRecord(
        ctg_id=f"CTG-{index + 1:06d}",
        group=group,
        conditions=conditions,
        gestational_age=gestational_age,
        sample_rate=sample_rate,
        fhr=[None if np.isnan(v) else float(v) for v in fhr],
    )


def legacy_indices(cfg: SynthConfig) -> np.ndarray:
    total = cfg.n_npo_records + cfg.n_apo_records
    rng = _record_rng(cfg.seed, _CORPUS_STREAM)
    count = int(round(cfg.legacy_epoch_fraction * total))
    return np.sort(rng.choice(total, size=count, replace=False))


def generate_corpus(cfg: SynthConfig, threads: int = 1) -> List[CtgRecord]:
    """
    Generate NPO records first, then APO records.

    Each record draws from its own stream derived from (seed, index), so the
    corpus is identical for any thread count.
    """
    total = cfg.n_npo_records + cfg.n_apo_records
    if total == 0:
        raise ConfigError("corpus needs at least one record (n_npo_records + n_apo_records = 0)")
    legacy = set(legacy_indices(cfg).tolist())
    groups = [Group.NPO] * cfg.n_npo_records + [Group.APO] * cfg.n_apo_records

    def build(index: int) -> CtgRecord:
        return generate_record(cfg, index, groups[index], index in legacy)

    logger.info(f"Generating {total} records ({cfg.n_apo_records} APO, {len(legacy)} legacy-rate)")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(build, range(total)))
    else:
        records = [build(i) for i in range(total)]
    return records


def corpus_summary(records: Sequence[CtgRecord]) -> CorpusSummary:
    if not records:
        raise InsufficientDataError("corpus_summary needs at least one record")
    counts: Dict[str, int] = {g.value: 0 for g in Group}
    missing = 0
    samples = 0
    for record in records:
        counts[record.group.value] += 1
        missing += sum(1 for v in record.fhr if v is None)
        samples += len(record.fhr)
    return CorpusSummary(
        counts=counts,
        mean_gestational_age=float(np.mean([r.gestational_age for r in records])),
        missing_percentage=100.0 * missing / samples if samples else 0.0,
    )


def split_summary(
    records: Sequence[CtgRecord],
    splits: Mapping[str, Sequence[str]],
    segments: Optional[SegmentSet] = None,
) -> pd.DataFrame:
    """Per-split cohort table: CTG and segment counts, APO share, gestation, missing data."""
    by_id = {r.ctg_id: r for r in records}
    rows = []
    for split, ctg_ids in splits.items():
        chosen = [by_id[c] for c in ctg_ids if c in by_id]
        if not chosen:
            continue
        ages = np.array([r.gestational_age for r in chosen])
        missing = sum(sum(1 for v in r.fhr if v is None) for r in chosen)
        total = sum(len(r.fhr) for r in chosen)
        row = {
            "split": split,
            "ctg_count": len(chosen),
            "apo_ctg_percentage": 100.0 * sum(r.label for r in chosen) / len(chosen),
            "gestational_age_mean": float(ages.mean()),
            "gestational_age_sd": float(ages.std()),
            "missing_percentage": 100.0 * missing / total if total else 0.0,
        }
        if segments is not None:
            part = segments.select_records(list(ctg_ids))
            row["segment_count"] = len(part)
            row["apo_segment_percentage"] = 100.0 * float(part.labels.mean()) if len(part) else 0.0
            row["missing_segment_sample_percentage"] = (
                100.0 * float((part.mask == MaskCode.MISSING).mean()) if len(part) else 0.0
            )
        rows.append(row)
    return pd.DataFrame(rows)

"""
Classification and calibration metrics
AUROC with bootstrap intervals, ECE, Youden threshold, operating points,
case aggregation and per-condition breakdowns
"""

import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy import stats
from sklearn.metrics import roc_curve
from typing_extensions import Self

from .config import EvalConfig
from .errors import InsufficientDataError
from .models import ConditionTag, Group, RecordInfo

logger = logging.getLogger(__name__)

Metric = Callable[[np.ndarray, np.ndarray], float]
AGGREGATIONS = ("median", "mean", "min", "max")
MAX_REDRAWS = 100


def _check_binary(labels: np.ndarray) -> Tuple[int, int]:
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise InsufficientDataError("metric needs both classes present")
    return n_pos, n_neg


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """(concordant pairs + 0.5 * tied pairs) / (n_pos * n_neg)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos, n_neg = _check_binary(y)
    u = stats.mannwhitneyu(s[y == 1], s[y == 0], alternative="two-sided", method="asymptotic").statistic
    return float(u) / (n_pos * n_neg)


def bootstrap_ci(
    metric: Metric,
    scores: Sequence[float],
    labels: Sequence[int],
    n_resamples: int = 1000,
    seed: int = 0,
    groups: Optional[Sequence[str]] = None,
    level: float = 0.95,
) -> Tuple[float, float]:
    """
    Percentile interval over resamples drawn with replacement.

    With `groups`, whole groups are resampled. Resample b uses its own
    generator seeded from (seed, b); a resample on which the metric is
    undefined is replaced by a fresh draw from the same generator.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if groups is None:
        members = [np.array([i]) for i in range(s.size)]
    else:
        frame = pd.DataFrame({"group": np.asarray(groups, dtype=object)})
        members = [np.asarray(idx) for _, idx in sorted(frame.groupby("group").indices.items())]
    if not members:
        raise InsufficientDataError("bootstrap_ci needs at least one observation")

    values = np.empty(n_resamples)
    skipped = 0
    for b in range(n_resamples):
        rng = np.random.default_rng([seed, b])
        for _ in range(MAX_REDRAWS):
            picks = rng.integers(0, len(members), len(members))
            index = np.concatenate([members[p] for p in picks])
            try:
                values[b] = metric(s[index], y[index])
                break
            except InsufficientDataError:
                skipped += 1
        else:
            raise InsufficientDataError(f"bootstrap resample {b} stayed degenerate after {MAX_REDRAWS} draws")
    if skipped:
        logger.debug(f"bootstrap_ci redrew {skipped} degenerate resamples")
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(values, [tail, 100.0 - tail])
    return float(low), float(high)


def ece(scores: Sequence[float], labels: Sequence[int], bins: int = 10) -> float:
    """Bin-weighted |accuracy - mean score| over equal-width bins on [0, 1]."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.size == 0:
        raise InsufficientDataError("ece needs at least one score")
    index = np.minimum(np.floor(s * bins).astype(int), bins - 1)
    total = 0.0
    for b in np.unique(index):
        inside = index == b
        total += inside.mean() * abs(y[inside].mean() - s[inside].mean())
    return float(total)


def _rates(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """TPR and FPR of 'score >= t' for each threshold."""
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    tpr = (pos.size - np.searchsorted(pos, thresholds, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    return tpr, fpr


def youden(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Midpoint threshold maximising TPR - FPR; ties go to the larger threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_binary(y)
    unique = np.unique(s)
    if unique.size == 1:
        return float(unique[0])
    candidates = (unique[:-1] + unique[1:]) / 2.0
    tpr, fpr = _rates(s, y, candidates)
    j = tpr - fpr
    best = np.flatnonzero(j >= j.max() - 1e-12)[-1]
    return float(candidates[best])


class OperatingPoint(BaseModel):
    threshold: float
    sensitivity: float = Field(ge=0.0, le=1.0)
    specificity: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    tn: int = Field(ge=0)
    fn: int = Field(ge=0)


def operating_point(scores: Sequence[float], labels: Sequence[int], threshold: float) -> OperatingPoint:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_binary(y)
    predicted = s >= threshold
    tp = int((predicted & (y == 1)).sum())
    fp = int((predicted & (y == 0)).sum())
    tn = int((~predicted & (y == 0)).sum())
    fn = int((~predicted & (y == 1)).sum())
    return OperatingPoint(
        threshold=threshold,
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
        f1=2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


def aggregate_case(ctg_ids: Sequence[str], scores: Sequence[float], labels: Sequence[int]) -> pd.DataFrame:
    """Per-case median (the reported score) plus mean/min/max for comparison."""
    frame = pd.DataFrame({"ctg_id": list(ctg_ids), "score": np.asarray(scores, dtype=np.float64), "label": labels})
    grouped = frame.groupby("ctg_id", sort=True)
    cases = grouped["score"].agg(list(AGGREGATIONS))
    cases["label"] = grouped["label"].first()
    cases["n_segments"] = grouped.size()
    return cases.reset_index()


class Interval(BaseModel):
    """Point estimate with a percentile bootstrap interval."""
    point: float
    low: float
    high: float

    @model_validator(mode="after")
    def validate_order(self) -> Self:
        if not (self.low <= self.point <= self.high):
            raise ValueError("interval must satisfy low <= point <= high")
        return self


def interval(point: float, bounds: Tuple[float, float]) -> Interval:
    """Widen a percentile interval just enough to contain its point estimate."""
    return Interval(point=point, low=min(bounds[0], point), high=max(bounds[1], point))


class OperatingPointReport(BaseModel):
    threshold: float
    sensitivity: Interval
    specificity: Interval
    f1: Interval

    @model_validator(mode="after")
    def validate_rates(self) -> Self:
        for value in (self.sensitivity, self.specificity, self.f1):
            if not (0.0 <= value.low and value.high <= 1.0):
                raise ValueError("rates must lie in [0, 1]")
        return self


class ConditionEntry(BaseModel):
    condition: ConditionTag
    present: bool
    n_cases: int = 0
    n_segments: int = 0
    segment_auroc: Optional[Interval] = None
    case_auroc: Optional[Interval] = None


class MetricsReport(BaseModel):
    """Segment- and case-level performance of one checkpoint on one split"""
    split: str
    n_segments: int
    n_cases: int
    segment_auroc: Interval
    case_auroc: Interval
    mse: float = Field(ge=0.0, description="Masked reconstruction MSE in bpm²")
    ece: float = Field(ge=0.0, le=1.0)
    case_ece: float = Field(ge=0.0, le=1.0)
    youden_threshold: float
    segment_operating_point: OperatingPointReport
    case_operating_point: OperatingPointReport
    per_condition: Dict[str, ConditionEntry]


def _rate(name: str, threshold: float) -> Metric:
    def metric(s: np.ndarray, y: np.ndarray) -> float:
        return float(getattr(operating_point(s, y, threshold), name))

    return metric


def _case_groups(segments: pd.DataFrame, config: EvalConfig) -> Optional[List[str]]:
    return segments["ctg_id"].astype(str).tolist() if config.resample_by_case else None


def operating_point_report(
    scores: np.ndarray,
    labels: np.ndarray,
    threshold: float,
    config: EvalConfig,
    groups: Optional[Sequence[str]] = None,
) -> OperatingPointReport:
    point = operating_point(scores, labels, threshold)
    fields = {}
    for name in ("sensitivity", "specificity", "f1"):
        bounds = bootstrap_ci(
            _rate(name, threshold), scores, labels, config.bootstrap_samples, config.bootstrap_seed, groups
        )
        fields[name] = interval(float(getattr(point, name)), bounds)
    return OperatingPointReport(threshold=threshold, **fields)


def per_condition_auroc(
    segments: pd.DataFrame,
    records: Mapping[str, RecordInfo],
    config: Optional[EvalConfig] = None,
) -> Dict[str, ConditionEntry]:
    """
    AUROC of condition-positive APO cases against every NPO case, at segment
    and case level. `segments` needs ctg_id, score and label columns.
    """
    config = config or EvalConfig()
    npo = {c for c, r in records.items() if r.group == Group.NPO}
    entries: Dict[str, ConditionEntry] = {}
    for tag in ConditionTag:
        positive = {c for c, r in records.items() if r.group == Group.APO and tag in r.conditions}
        chosen = segments[segments["ctg_id"].isin(positive | npo)]
        has_pos = chosen["ctg_id"].isin(positive).any()
        has_neg = chosen["ctg_id"].isin(npo).any()
        if not (has_pos and has_neg):
            entries[tag.value] = ConditionEntry(condition=tag, present=False)
            continue
        s, y = chosen["score"].to_numpy(), chosen["label"].to_numpy()
        cases = aggregate_case(chosen["ctg_id"].tolist(), s, y)
        seg_ci = bootstrap_ci(
            auroc, s, y, config.bootstrap_samples, config.bootstrap_seed, _case_groups(chosen, config)
        )
        case_ci = bootstrap_ci(
            auroc,
            cases["median"].to_numpy(),
            cases["label"].to_numpy(),
            config.bootstrap_samples,
            config.bootstrap_seed,
        )
        entries[tag.value] = ConditionEntry(
            condition=tag,
            present=True,
            n_cases=int(cases["label"].sum()),
            n_segments=int(y.sum()),
            segment_auroc=interval(auroc(s, y), seg_ci),
            case_auroc=interval(auroc(cases["median"], cases["label"]), case_ci),
        )
    absent = [k for k, e in entries.items() if not e.present]
    if absent:
        logger.info(f"No cases for conditions: {', '.join(absent)}")
    return entries


def aggregation_comparison(cases: pd.DataFrame) -> pd.DataFrame:
    """Case AUROC under each aggregation rule."""
    rows = [{"aggregation": name, "case_auroc": auroc(cases[name], cases["label"])} for name in AGGREGATIONS]
    return pd.DataFrame(rows)


def build_metrics_report(
    segments: pd.DataFrame,
    records: Mapping[str, RecordInfo],
    mse: float,
    config: Optional[EvalConfig] = None,
    split: str = "test",
) -> MetricsReport:
    """Everything the evaluation report carries, from a (ctg_id, score, label) table."""
    config = config or EvalConfig()
    s = segments["score"].to_numpy(dtype=np.float64)
    y = segments["label"].to_numpy()
    cases = aggregate_case(segments["ctg_id"].tolist(), s, y)
    case_s, case_y = cases["median"].to_numpy(), cases["label"].to_numpy()

    groups = _case_groups(segments, config)
    seg_auc = interval(
        auroc(s, y), bootstrap_ci(auroc, s, y, config.bootstrap_samples, config.bootstrap_seed, groups)
    )
    case_auc = interval(
        auroc(case_s, case_y), bootstrap_ci(auroc, case_s, case_y, config.bootstrap_samples, config.bootstrap_seed)
    )
    threshold = youden(s, y)
    case_threshold = youden(case_s, case_y)
    report = MetricsReport(
        split=split,
        n_segments=int(s.size),
        n_cases=int(len(cases)),
        segment_auroc=seg_auc,
        case_auroc=case_auc,
        mse=mse,
        ece=ece(s, y, config.ece_bins),
        case_ece=ece(case_s, case_y, config.ece_bins),
        youden_threshold=threshold,
        segment_operating_point=operating_point_report(s, y, threshold, config, groups),
        case_operating_point=operating_point_report(case_s, case_y, case_threshold, config),
        per_condition=per_condition_auroc(segments, records, config),
    )
    logger.info(
        f"AUROC segment {seg_auc.point:.3f} [{seg_auc.low:.3f}, {seg_auc.high:.3f}], "
        f"case {case_auc.point:.3f}; ECE {report.ece:.3f}; Youden threshold {threshold:.3f}"
    )
    return report


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> pd.DataFrame:
    fpr, tpr, thresholds = roc_curve(np.asarray(labels), np.asarray(scores, dtype=np.float64), drop_intermediate=False)
    return pd.DataFrame({"threshold": thresholds, "fpr": fpr, "tpr": tpr})


def score_histogram(scores: Sequence[float], labels: Sequence[int], bins: int = 20) -> pd.DataFrame:
    """Per-group counts over equal-width score bins on [0, 1]."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    edges = np.linspace(0.0, 1.0, bins + 1)
    frame = pd.DataFrame({"bin_low": edges[:-1], "bin_high": edges[1:]})
    for label, group in ((0, Group.NPO.value), (1, Group.APO.value)):
        counts, _ = np.histogram(s[y == label], bins=edges)
        frame[f"{group.lower()}_count"] = counts
    return frame


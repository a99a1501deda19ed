"""
Record and segment types shared across the pipeline.
"""

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator
from typing_extensions import Self

from .errors import DataValidationError

SAMPLE_RATE_HZ = 4.0
EPOCH_SECONDS = 3.75
LEGACY_SAMPLE_RATE_HZ = 1.0 / EPOCH_SECONDS
SEGMENT_SAMPLES = 1200
SEGMENT_STRIDE = 600
FFT_BINS = SEGMENT_SAMPLES // 2 + 1
FHR_MIN_BPM = 30.0
FHR_MAX_BPM = 240.0


class Group(str, Enum):
    NPO = "NPO"
    APO = "APO"


class ConditionTag(str, Enum):
    """Adverse-outcome categories an APO record can carry (one or more)."""
    IUGR = "iugr"
    ACIDAEMIA = "acidaemia"
    LOW_APGARS = "low_apgars"
    STILLBIRTH = "stillbirth"
    EARLY_DEATH = "early_death"
    ASPHYXIA = "asphyxia"
    HIE = "hie"
    NEONATAL_SEPSIS = "neonatal_sepsis"
    PERINATAL_INFECTION = "perinatal_infection"
    RESPIRATORY_CONDITION = "respiratory_condition"
    NEONATAL_CARE = "neonatal_care"


class MaskCode(IntEnum):
    VALID = 0
    MISSING = 1
    PAD = 2


def is_legacy_rate(sample_rate: float) -> bool:
    return abs(sample_rate - LEGACY_SAMPLE_RATE_HZ) < 1e-9


class CtgRecord(BaseModel):
    ctg_id: str = Field(description="Unique recording identifier", min_length=1)
    group: Group = Field(description="Outcome group of the pregnancy")
    conditions: List[ConditionTag] = Field(
        default_factory=list,
        description="Adverse-outcome tags; empty for NPO, at least one for APO",
    )
    gestational_age: float = Field(description="Weeks of gestation", ge=27.0, le=36.0)
    sample_rate: float = Field(description="Samples per second", gt=0.0)
    fhr: List[Optional[float]] = Field(description="FHR samples in bpm, None where missing")

    @model_validator(mode="after")
    def validate_record(self) -> Self:
        if self.group == Group.NPO and self.conditions:
            raise ValueError("NPO records cannot carry condition tags")
        if self.group == Group.APO and not self.conditions:
            raise ValueError("APO records need at least one condition tag")
        if len(set(self.conditions)) != len(self.conditions):
            raise ValueError("condition tags must be unique")
        values = self.fhr_array()
        present = values[~np.isnan(values)]
        if present.size and (present.min() < FHR_MIN_BPM or present.max() > FHR_MAX_BPM):
            raise ValueError(f"FHR samples must lie in [{FHR_MIN_BPM}, {FHR_MAX_BPM}] bpm")
        return self

    @property
    def label(self) -> int:
        return 1 if self.group == Group.APO else 0

    @property
    def is_legacy(self) -> bool:
        return is_legacy_rate(self.sample_rate)

    def fhr_array(self) -> np.ndarray:
        """Samples as float64 with NaN marking missing values."""
        return np.array(self.fhr, dtype=np.float64)


class NormStats(BaseModel):
    mean: float = Field(description="Mean of VALID training samples (bpm)")
    sd: float = Field(description="Population SD of VALID training samples (bpm)", gt=0.0)


class FeatureVector(BaseModel):
    """Clinical features of one segment."""
    baseline: float
    baseline_shift: float
    baseline_anomaly: float
    stv: float
    ltv: float
    sd: float = Field(ge=0.0)
    range: float = Field(ge=0.0)
    accel_count: int = Field(ge=0)
    decel_count: int = Field(ge=0)

    @model_validator(mode="after")
    def validate_anomaly(self) -> Self:
        if self.baseline_anomaly != self.baseline - 140.0:
            raise ValueError("baseline_anomaly must equal baseline - 140")
        return self


FEATURE_NAMES: List[str] = list(FeatureVector.model_fields.keys())


class CorpusSummary(BaseModel):
    counts: Dict[str, int] = Field(description="Records per outcome group")
    mean_gestational_age: float
    missing_percentage: float = Field(ge=0.0, le=100.0)


@dataclass
class FhrSegment:
    """One 5-minute window of a record, values in bpm (0.0 where not VALID)."""
    parent_id: str
    start_offset: float
    values: np.ndarray
    mask: np.ndarray
    label: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if self.values.shape != (SEGMENT_SAMPLES,) or self.mask.shape != (SEGMENT_SAMPLES,):
            raise DataValidationError(f"segment of {self.parent_id} must hold {SEGMENT_SAMPLES} samples")
        pad = self.mask == MaskCode.PAD
        if pad.any():
            first = int(np.argmax(pad))
            if not pad[first:].all():
                raise DataValidationError("PAD positions must form a contiguous suffix")
        if int((self.mask == MaskCode.MISSING).sum()) > SEGMENT_SAMPLES // 4:
            raise DataValidationError("segment has more than 25% missing samples")
        if self.label not in (0, 1):
            raise DataValidationError("label must be 0 (NPO) or 1 (APO)")

    @property
    def valid(self) -> np.ndarray:
        return self.mask == MaskCode.VALID

    @property
    def start_sample(self) -> int:
        return int(round(self.start_offset * SAMPLE_RATE_HZ))


@dataclass
class RecordInfo:
    """Per-record metadata carried alongside its segments."""
    ctg_id: str
    group: Group
    conditions: List[ConditionTag] = field(default_factory=list)
    gestational_age: float = 0.0


@dataclass
class SegmentSet:
    """Columnar view of many segments, ordered by (ctg_id, start_offset)."""
    parent_ids: np.ndarray
    start_offsets: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    records: Dict[str, RecordInfo] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def from_segments(
        cls, segments: Sequence[FhrSegment], records: Optional[Dict[str, RecordInfo]] = None
    ) -> "SegmentSet":
        ordered = sorted(segments, key=lambda s: (s.parent_id, s.start_offset))
        if not ordered:
            empty = np.zeros((0, SEGMENT_SAMPLES))
            return cls(
                parent_ids=np.array([], dtype=object),
                start_offsets=np.zeros(0),
                values=empty,
                mask=empty.astype(np.int8),
                labels=np.zeros(0, dtype=np.int8),
                records=dict(records or {}),
            )
        return cls(
            parent_ids=np.array([s.parent_id for s in ordered], dtype=object),
            start_offsets=np.array([s.start_offset for s in ordered], dtype=np.float64),
            values=np.stack([s.values for s in ordered]),
            mask=np.stack([s.mask for s in ordered]).astype(np.int8),
            labels=np.array([s.label for s in ordered], dtype=np.int8),
            records=dict(records or {}),
        )

    def segment(self, index: int) -> FhrSegment:
        return FhrSegment(
            parent_id=str(self.parent_ids[index]),
            start_offset=float(self.start_offsets[index]),
            values=self.values[index],
            mask=self.mask[index],
            label=int(self.labels[index]),
        )

    def subset(self, index: np.ndarray) -> "SegmentSet":
        kept = set(self.parent_ids[index].tolist())
        return SegmentSet(
            parent_ids=self.parent_ids[index],
            start_offsets=self.start_offsets[index],
            values=self.values[index],
            mask=self.mask[index],
            labels=self.labels[index],
            records={k: v for k, v in self.records.items() if k in kept},
        )

    def select_records(self, ctg_ids: Sequence[str]) -> "SegmentSet":
        wanted = set(ctg_ids)
        return self.subset(np.array([p in wanted for p in self.parent_ids], dtype=bool))

    def record_ids(self) -> List[str]:
        return sorted(set(self.parent_ids.tolist()))

"""
Run configuration management
Typed settings per pipeline stage plus a key = value file loader
"""

import logging
import typing
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv.parser import Binding, parse_stream
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from typing_extensions import Self

from .errors import ConfigError
from .models import SEGMENT_SAMPLES, ConditionTag

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.txt"


def _uniform_condition_mix() -> Dict[ConditionTag, float]:
    tags = list(ConditionTag)
    return {tag: 1.0 / len(tags) for tag in tags}


class StageConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SynthConfig(StageConfig):
    """Configuration for the synthetic CTG corpus generator"""

    n_npo_records: int = Field(default=200, ge=0, description="Number of NPO records")
    n_apo_records: int = Field(default=200, ge=0, description="Number of APO records")
    record_minutes: float = Field(default=30.0, ge=5.0, description="Recording length in minutes")
    sample_rate: float = Field(default=4.0, description="Sample rate of generated signals (fixed 4 Hz)")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Corpus seed")
    condition_mix: Dict[ConditionTag, float] = Field(
        default_factory=_uniform_condition_mix,
        description="Probability of each condition tag being the primary APO tag",
    )
    comorbidity_rate: float = Field(
        default=0.1, ge=0.0, le=1.0,
        description="Scale of the independent chance that an APO record carries extra tags",
    )
    condition_severity: Dict[ConditionTag, float] = Field(
        default_factory=dict,
        description="Per-tag factor >= 1 dividing the APO variability scale",
    )
    missing_burst_rate: float = Field(default=1.0, ge=0.0, description="Expected missing bursts per 10 min")
    spike_rate: float = Field(default=0.5, ge=0.0, description="Expected single-sample spikes per 10 min")
    legacy_epoch_fraction: float = Field(
        default=0.1, ge=0.0, le=1.0, description="Fraction of records emitted at 3.75 s/sample"
    )
    baseline_mean: float = Field(default=140.0, description="Mean NPO baseline (bpm)")
    baseline_sd: float = Field(default=10.0, ge=0.0, description="Between-record baseline SD (bpm)")
    apo_baseline_offset: float = Field(default=6.0, description="APO baseline offset (bpm)")
    variability_amplitude: List[float] = Field(
        default_factory=lambda: [4.0, 8.0], description="Range of sinusoidal amplitude per component (bpm)"
    )
    apo_variability_scale: List[float] = Field(
        default_factory=lambda: [0.2, 0.6], description="Range of the APO variability scaling factor"
    )
    noise_sd: float = Field(default=1.0, ge=0.0, description="Stationary SD of the AR(1) noise (bpm)")
    npo_accel_rate: float = Field(default=2.0, ge=0.0, description="NPO accelerations per 10 min")
    apo_accel_rate: float = Field(default=0.5, ge=0.0, description="APO accelerations per 10 min")
    apo_decel_rate: float = Field(default=0.6, ge=0.0, description="APO decelerations per 10 min")

    @field_validator("sample_rate")
    @classmethod
    def validate_sample_rate(cls, value: float) -> float:
        if value != 4.0:
            raise ValueError("generated signals are fixed at 4 Hz")
        return value

    @field_validator("variability_amplitude", "apo_variability_scale")
    @classmethod
    def validate_range(cls, value: List[float]) -> List[float]:
        if len(value) != 2 or value[0] > value[1] or value[0] < 0:
            raise ValueError("expected a non-negative [low, high] pair")
        return value

    @model_validator(mode="after")
    def validate_mix(self) -> Self:
        if any(p < 0.0 or p > 1.0 for p in self.condition_mix.values()):
            raise ValueError("condition_mix probabilities must lie in [0, 1]")
        if self.condition_mix and abs(sum(self.condition_mix.values()) - 1.0) > 1e-6:
            raise ValueError("condition_mix values must sum to 1")
        if not self.condition_mix and self.n_apo_records > 0:
            raise ValueError("APO records need a non-empty condition_mix")
        if any(s < 1.0 for s in self.condition_severity.values()):
            raise ValueError("condition_severity factors must be >= 1")
        if self.apo_variability_scale[1] > 1.0:
            raise ValueError("apo_variability_scale must stay within [0, 1]")
        return self


class PreprocessConfig(StageConfig):
    """Denoising, windowing and splitting settings"""

    band_low: float = Field(default=50.0, description="Samples below this (bpm) become missing")
    band_high: float = Field(default=210.0, description="Samples above this (bpm) become missing")
    spike_delta: float = Field(default=25.0, gt=0.0, description="Single-sample jump on both flanks (bpm)")
    smoothing_window: int = Field(default=5, ge=1, description="Moving-average length after up-sampling")
    max_missing_fraction: float = Field(default=0.25, ge=0.0, le=1.0)
    min_trailing_samples: int = Field(default=900, ge=1, le=SEGMENT_SAMPLES)
    min_sd: float = Field(default=1.0, ge=0.0, description="Flat-line SD threshold (bpm)")
    min_range: float = Field(default=5.0, ge=0.0, description="Flat-line range threshold (bpm)")
    validation_fraction: float = Field(default=1.0 / 6.0, gt=0.0, lt=0.5)
    test_fraction: float = Field(default=1.0 / 6.0, gt=0.0, lt=0.5)
    split_seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def validate_band(self) -> Self:
        if self.band_low >= self.band_high:
            raise ValueError("band_low must be below band_high")
        return self


class FeatureConfig(StageConfig):
    """Clinical feature thresholds"""

    baseline_window_seconds: float = Field(default=60.0, gt=0.0)
    baseline_trim_bpm: float = Field(default=10.0, gt=0.0)
    event_threshold_bpm: float = Field(default=15.0, gt=0.0)
    event_min_seconds: float = Field(default=15.0, gt=0.0)
    event_merge_seconds: float = Field(default=5.0, ge=0.0)


class ModelConfig(StageConfig):
    """Architecture, loss and optimisation settings of the supervised VAE"""

    latent_dim: int = Field(default=32, ge=2)
    d_model: int = Field(default=32, ge=1)
    token_patch: int = Field(default=8, ge=1, description="Samples per token")
    ffn_multiplier: int = Field(default=2, ge=1)
    kl_target_per_dim: float = Field(default=0.5, gt=0.0)
    tc_target: float = Field(default=200.0, gt=0.0)
    focal_gamma: float = Field(default=2.0, ge=0.0)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=64, ge=2)
    seed: int = Field(default=0, ge=0)
    max_epochs: int = Field(default=100, ge=1)
    patience: int = Field(default=10, ge=1)
    beta_init: float = Field(default=1.0, ge=0.0)
    lambda_init: float = Field(default=1.0, ge=0.0)
    adapt_coefficients: bool = Field(default=True, description="Update beta/lambda each epoch")
    controller_gain: float = Field(default=0.05, ge=0.0)
    beta_bounds: List[float] = Field(default_factory=lambda: [1e-4, 10.0])
    lambda_bounds: List[float] = Field(default_factory=lambda: [0.0, 10.0])
    logvar_limit: float = Field(default=8.0, gt=0.0)
    layer_norm_eps: float = Field(default=1e-5, ge=0.0)
    precision: typing.Literal["float32", "float64"] = Field(default="float32")

    @field_validator("beta_bounds", "lambda_bounds")
    @classmethod
    def validate_bounds(cls, value: List[float]) -> List[float]:
        if len(value) != 2 or value[0] < 0 or value[0] > value[1]:
            raise ValueError("bounds must be a [low, high] pair with 0 <= low <= high")
        return value

    @model_validator(mode="after")
    def validate_shapes(self) -> Self:
        if self.batch_size % 2:
            raise ValueError("batch_size must be even (balanced halves)")
        if SEGMENT_SAMPLES % self.token_patch:
            raise ValueError(f"token_patch must divide {SEGMENT_SAMPLES}")
        return self


class EvalConfig(StageConfig):
    bootstrap_samples: int = Field(default=1000, ge=10)
    bootstrap_seed: int = Field(default=0, ge=0)
    resample_by_case: bool = Field(
        default=True, description="Resample whole CTGs for segment-level intervals (segments of a case are correlated)"
    )
    ece_bins: int = Field(default=10, ge=1)
    histogram_bins: int = Field(default=20, ge=1)
    trace_ctg_id: Optional[str] = Field(default=None, description="Record to trace; longest test NPO if unset")
    trace_band: float = Field(default=0.05, ge=0.0, le=0.5, description="Half-width of the 'near threshold' score band")


class InterpretConfig(StageConfig):
    traversal_steps: int = Field(default=9, ge=2)
    direction_span: float = Field(default=10.0, gt=0.0)
    dimension_span: float = Field(default=5.0, gt=0.0)
    component_span: float = Field(default=5.0, gt=0.0)
    n_dimension_traversals: int = Field(default=5, ge=1)
    ica_components: int = Field(default=5, ge=1)
    ica_max_iter: int = Field(default=500, ge=1)
    ica_tol: float = Field(default=1e-6, gt=0.0)
    ica_seed: int = Field(default=0, ge=0)
    ica_require_convergence: bool = Field(
        default=False, description="Fail the interpret run instead of warning when ICA does not converge"
    )


class SweepConfig(StageConfig):
    tc_targets: List[float] = Field(default_factory=lambda: [3.0, 20.0, 50.0, 200.0])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])


class RunConfig(StageConfig):
    """Everything one CLI invocation needs; dotted keys address the sections."""

    synth: SynthConfig = Field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    interpret: InterpretConfig = Field(default_factory=InterpretConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    threads: int = Field(default=1, ge=1, description="Worker threads for per-record stages")


SEED_KEYS: Tuple[str, ...] = (
    "synth.seed",
    "preprocess.split_seed",
    "model.seed",
    "eval.bootstrap_seed",
    "interpret.ica_seed",
)


def _convert(raw: str, annotation: Any) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    text = raw.strip()
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(text, inner[0])
    if origin in (list, List):
        return [item.strip() for item in text.split(",") if item.strip()]
    if origin in (dict, Dict):
        result: Dict[str, str] = {}
        for item in text.split(","):
            if not item.strip():
                continue
            if ":" not in item:
                raise ConfigError(f"expected key:value pairs, got {item.strip()!r}")
            key, value = item.split(":", 1)
            result[key.strip()] = value.strip()
        return result
    return text


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{_format(v)}" for k, v in sorted(value.items()))
    return str(value)


def _binding_line(binding: Binding) -> int:
    """Line of the binding itself; the parser folds preceding blank lines into it."""
    text = binding.original.string
    leading = text[: len(text) - len(text.lstrip())]
    return binding.original.line + leading.count("\n")


class RunConfigLoader:
    """Loads a RunConfig from defaults, a key = value file and overrides"""

    def __init__(self, config_file: Optional[Path] = None):
        self.config_file = Path(config_file) if config_file else None

    def load(self, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
        file_values = self._read_file() if self.config_file else {}
        merged = self._merge_configs(file_values, dict(overrides or {}))
        config = self._build(merged)
        logger.info(f"Resolved configuration with {len(merged)} explicit keys")
        return config

    def _read_file(self) -> Dict[str, str]:
        assert self.config_file is not None
        if not self.config_file.exists():
            raise ConfigError(f"configuration file not found: {self.config_file}")
        values: Dict[str, str] = {}
        with open(self.config_file, "r", encoding="utf-8") as f:
            for binding in parse_stream(f):
                where = f"{self.config_file}:{_binding_line(binding)}"
                if binding.error:
                    raise ConfigError(f"{where}: cannot parse {binding.original.string.strip()!r}")
                if binding.key is None:
                    continue
                if binding.value is None:
                    raise ConfigError(f"{where}: expected 'key = value'")
                if binding.key in values:
                    raise ConfigError(f"{where}: duplicate key {binding.key!r}")
                values[binding.key] = binding.value
        return values

    def _merge_configs(self, loaded: Dict[str, str], overrides: Dict[str, str]) -> Dict[str, str]:
        """Later sources win: file values, then command-line overrides"""
        result = dict(loaded)
        result.update(overrides)
        return result

    def _build(self, flat: Mapping[str, str]) -> RunConfig:
        nested: Dict[str, Any] = {}
        for key, raw in flat.items():
            section, _, name = key.partition(".")
            if not name:
                field = RunConfig.model_fields.get(section)
                if field is None or section in _SECTIONS:
                    raise ConfigError(f"unknown configuration key: {key}")
                nested[section] = _convert(raw, field.annotation)
                continue
            section_model = _SECTIONS.get(section)
            if section_model is None or name not in section_model.model_fields:
                raise ConfigError(f"unknown configuration key: {key}")
            annotation = section_model.model_fields[name].annotation
            nested.setdefault(section, {})[name] = _convert(raw, annotation)
        try:
            return RunConfig.model_validate(nested)
        except ValidationError as e:
            raise ConfigError(f"invalid configuration: {e}") from e


_SECTIONS: Dict[str, type] = {
    name: typing.cast(type, field.annotation)
    for name, field in RunConfig.model_fields.items()
    if isinstance(field.annotation, type) and issubclass(field.annotation, BaseModel)
}


def config_lines(config: RunConfig) -> List[str]:
    """The resolved configuration as sorted key = value lines."""
    lines: List[str] = []
    dumped = config.model_dump(mode="json")
    for section, values in dumped.items():
        if isinstance(values, dict) and section in _SECTIONS:
            for name, value in values.items():
                lines.append(f"{section}.{name} = {_format(value)}")
        else:
            lines.append(f"{section} = {_format(values)}")
    return sorted(lines)


def seed_overrides(seed: int) -> Dict[str, str]:
    return {key: str(seed) for key in SEED_KEYS}


def write_resolved_config(config: RunConfig, directory: Path) -> Path:
    """Echo the effective configuration next to a run's outputs."""
    path = Path(directory) / RESOLVED_CONFIG_NAME
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(config_lines(config)) + "\n")
    return path

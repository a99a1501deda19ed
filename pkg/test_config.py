"""
Tests for the run configuration and its key = value loader
"""

import pytest
from pydantic import ValidationError

from fhrvae.config import (
    RESOLVED_CONFIG_NAME,
    ModelConfig,
    PreprocessConfig,
    RunConfig,
    RunConfigLoader,
    config_lines,
    seed_overrides,
    write_resolved_config,
)
from fhrvae.errors import ConfigError
from fhrvae.models import ConditionTag


def write(tmp_path, text):
    path = tmp_path / "run.conf"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults():
    config = RunConfigLoader().load()
    assert config.model.latent_dim == 32
    assert config.preprocess.validation_fraction == pytest.approx(1.0 / 6.0)
    assert config.synth.sample_rate == 4.0
    assert config.threads == 1
    assert sum(config.synth.condition_mix.values()) == pytest.approx(1.0)


def test_file_values_and_overrides(tmp_path):
    """Comments and blank lines are skipped; overrides win over the file"""
    path = write(
        tmp_path,
        "# small run\n"
        "synth.n_npo_records = 10   # inline comment\n"
        "\n"
        "model.beta_bounds = 0.001, 5\n"
        "synth.condition_mix = iugr:0.5, hie:0.5\n"
        "sweep.seeds = 3,4\n"
        "eval.trace_ctg_id = CTG-000002\n"
        "model.adapt_coefficients = false\n"
        "threads = 2\n",
    )
    config = RunConfigLoader(path).load({"synth.n_npo_records": "12"})
    assert config.synth.n_npo_records == 12
    assert config.model.beta_bounds == [0.001, 5.0]
    assert config.synth.condition_mix == {ConditionTag.IUGR: 0.5, ConditionTag.HIE: 0.5}
    assert config.sweep.seeds == [3, 4]
    assert config.eval.trace_ctg_id == "CTG-000002"
    assert config.model.adapt_coefficients is False
    assert config.threads == 2
    assert config.model.model_fields_set == {"beta_bounds", "adapt_coefficients"}


@pytest.mark.parametrize(
    "text, message",
    [
        ("synth.n_npo_records 10\n", "run.conf:1"),
        ("model.seed = 1\nmodel.seed = 2\n", "run.conf:2"),
        ("model.no_such_key = 1\n", "unknown configuration key"),
        ("nonsense = 1\n", "unknown configuration key"),
        ("model = 1\n", "unknown configuration key"),
        ("model.batch_size = 3\n", "invalid configuration"),
        ("preprocess.band_low = 220\n", "invalid configuration"),
        ("synth.condition_mix = iugr\n", "key:value"),
        ("synth.seed\n", "run.conf:1: expected"),
        ("# header\nmodel.seed = 1\n\n\nmodel.seed = 2\n", "run.conf:5: duplicate"),
    ],
)
def test_bad_files(tmp_path, text, message):
    with pytest.raises(ConfigError, match=message):
        RunConfigLoader(write(tmp_path, text)).load()


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfigLoader(tmp_path / "absent.conf").load()


def test_seed_sets_every_seed():
    config = RunConfigLoader().load(seed_overrides(7))
    assert config.synth.seed == 7
    assert config.preprocess.split_seed == 7
    assert config.model.seed == 7
    assert config.eval.bootstrap_seed == 7
    assert config.interpret.ica_seed == 7


def test_resolved_config_reloads_to_the_same_values(tmp_path):
    config = RunConfigLoader().load({"model.latent_dim": "8", "eval.trace_ctg_id": "CTG-000001"})
    path = write_resolved_config(config, tmp_path)
    assert path.name == RESOLVED_CONFIG_NAME
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == sorted(lines)
    assert "model.latent_dim = 8" in lines
    reloaded = RunConfigLoader(path).load()
    assert reloaded.model_dump() == config.model_dump()
    assert config_lines(reloaded) == config_lines(config)


class TestSectionValidation:
    """Section-level invariants"""

    def test_token_patch_must_divide_segment(self):
        with pytest.raises(ValidationError):
            ModelConfig(token_patch=7)

    def test_batch_must_be_even(self):
        with pytest.raises(ValidationError):
            ModelConfig(batch_size=5)

    def test_split_fractions_bounded(self):
        with pytest.raises(ValidationError):
            PreprocessConfig(test_fraction=0.5)

    def test_unknown_field_forbidden(self):
        with pytest.raises(ValidationError):
            RunConfig.model_validate({"model": {"layers": 3}})


def test_quoted_values_and_trailing_comments(tmp_path):
    path = write(tmp_path, 'eval.trace_ctg_id = "CTG-000003"  # chosen record\nmodel.latent_dim=6\n')
    config = RunConfigLoader(path).load()
    assert config.eval.trace_ctg_id == "CTG-000003"
    assert config.model.latent_dim == 6

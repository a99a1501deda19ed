"""
Tests for on-disk formats: corpus NDJSON, array containers, segments and checkpoints
"""

import json

import numpy as np
import pytest

from fhrvae.checkpoint import ModelCheckpoint
from fhrvae.config import ModelConfig
from fhrvae.errors import CheckpointMismatchError, DataValidationError
from fhrvae.formats import (
    atomic_output_dir,
    decode_container,
    encode_container,
    load_segments,
    read_corpus,
    read_json,
    save_segments,
    write_corpus,
    write_json,
)
from fhrvae.models import SEGMENT_SAMPLES, ConditionTag, CtgRecord, FhrSegment, Group, NormStats, RecordInfo, SegmentSet
from fhrvae.vae import init_params


def sample_records():
    return [
        CtgRecord(ctg_id="CTG-000001", group=Group.NPO, gestational_age=31.5, sample_rate=4.0,
                  fhr=[140.0, None, 141.5]),
        CtgRecord(ctg_id="CTG-000002", group=Group.APO, conditions=[ConditionTag.HIE], gestational_age=29.0,
                  sample_rate=1 / 3.75, fhr=[150.25, 151.0]),
    ]


def tiny_config(**overrides):
    values = dict(latent_dim=4, d_model=8, token_patch=100, batch_size=2, precision="float64")
    values.update(overrides)
    return ModelConfig(**values)


class TestCorpus:
    """Tests for the NDJSON corpus file"""

    def test_write_then_read(self, tmp_path):
        path = tmp_path / "corpus.ndjson"
        write_corpus(sample_records(), path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert json.loads(lines[0]) == {"count": 2, "format_version": 1, "kind": "ctg-corpus"}
        records = read_corpus(path)
        assert [r.model_dump() for r in records] == [r.model_dump() for r in sample_records()]

    def test_malformed_line_reports_its_number(self, tmp_path):
        path = tmp_path / "corpus.ndjson"
        write_corpus(sample_records(), path)
        with open(path, "a", encoding="utf-8") as f:
            f.write('{"ctg_id": "CTG-000003", "group": "NPO"}\n')
        with pytest.raises(DataValidationError, match="line 4"):
            read_corpus(path)

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / "corpus.ndjson"
        records = sample_records()
        write_corpus([records[0], records[0]], path)
        with pytest.raises(DataValidationError, match="duplicate ctg_id"):
            read_corpus(path)

    def test_header_required(self, tmp_path):
        path = tmp_path / "corpus.ndjson"
        path.write_text('{"kind": "something-else"}\n', encoding="utf-8")
        with pytest.raises(DataValidationError, match="line 1"):
            read_corpus(path)
        empty = tmp_path / "empty.ndjson"
        empty.write_text("", encoding="utf-8")
        with pytest.raises(DataValidationError):
            read_corpus(empty)


class TestContainer:
    """Tests for the binary array container"""

    def test_arrays_and_meta_survive(self):
        arrays = {"b": np.arange(6, dtype=np.int8).reshape(2, 3), "a": np.linspace(0, 1, 4).astype(np.float32)}
        meta, decoded = decode_container(encode_container("test", {"note": "x"}, arrays), "test")
        assert meta == {"note": "x"}
        np.testing.assert_array_equal(decoded["b"], arrays["b"])
        assert decoded["a"].dtype == np.float32

    def test_encoding_is_byte_stable(self):
        arrays = {"w": np.ones((2, 2))}
        assert encode_container("k", {"z": 1, "a": 2}, arrays) == encode_container("k", {"a": 2, "z": 1}, arrays)

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda p: b"NOTMAGIC" + p[8:], "bad magic"),
            (lambda p: p.replace(b'"format_version":1', b'"format_version":9'), "format_version"),
        ],
    )
    def test_corrupt_payloads(self, mutate, message):
        payload = encode_container("k", {}, {"w": np.ones(3)})
        with pytest.raises(DataValidationError, match=message):
            decode_container(mutate(payload), "k")

    def test_wrong_kind(self):
        with pytest.raises(DataValidationError, match="expected a checkpoint"):
            decode_container(encode_container("segments", {}, {}), "checkpoint")

    def test_json_helpers(self, tmp_path):
        write_json({"b": 1, "a": [1, 2]}, tmp_path / "x.json")
        assert read_json(tmp_path / "x.json") == {"a": [1, 2], "b": 1}
        (tmp_path / "bad.json").write_text("{\n  oops\n}", encoding="utf-8")
        with pytest.raises(DataValidationError, match="line 2"):
            read_json(tmp_path / "bad.json")


def test_segments_file_keeps_rows_and_records(tmp_path):
    mask = np.zeros(SEGMENT_SAMPLES, dtype=np.int8)
    mask[:10] = 1
    segments = SegmentSet.from_segments(
        [
            FhrSegment("B", 150.0, np.full(SEGMENT_SAMPLES, 141.0), mask, 1),
            FhrSegment("A", 0.0, np.full(SEGMENT_SAMPLES, 139.0), np.zeros(SEGMENT_SAMPLES, dtype=np.int8), 0),
        ],
        {"A": RecordInfo("A", Group.NPO, [], 30.0), "B": RecordInfo("B", Group.APO, [ConditionTag.IUGR], 33.0)},
    )
    save_segments(segments, tmp_path / "segments.bin", {"splits": {"train": ["A"], "test": ["B"]}})
    loaded, meta = load_segments(tmp_path / "segments.bin")
    assert meta == {"splits": {"train": ["A"], "test": ["B"]}}
    assert list(loaded.parent_ids) == ["A", "B"]
    np.testing.assert_array_equal(loaded.mask, segments.mask)
    np.testing.assert_array_equal(loaded.values, segments.values)
    assert loaded.records["B"].conditions == [ConditionTag.IUGR]


def test_atomic_output_dir_leaves_nothing_on_failure(tmp_path):
    out = tmp_path / "run"
    with pytest.raises(RuntimeError):
        with atomic_output_dir(out) as staging:
            (staging / "partial.csv").write_text("x", encoding="utf-8")
            raise RuntimeError("boom")
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []

    with atomic_output_dir(out) as staging:
        (staging / "done.csv").write_text("x", encoding="utf-8")
    assert [p.name for p in out.iterdir()] == ["done.csv"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["run"]


class TestCheckpoint:
    """Tests for checkpoint persistence and compatibility checks"""

    def make(self, **overrides):
        config = tiny_config(**overrides)
        return ModelCheckpoint(config, NormStats(mean=140.0, sd=12.0), init_params(config), {"best_epoch": 3})

    def test_save_and_load(self, tmp_path):
        checkpoint = self.make()
        checkpoint.save(tmp_path / "checkpoint.bin")
        loaded = ModelCheckpoint.load(tmp_path / "checkpoint.bin")
        assert loaded.config.model_dump() == checkpoint.config.model_dump()
        assert loaded.norm_stats.model_dump() == checkpoint.norm_stats.model_dump()
        assert loaded.training == {"best_epoch": 3}
        assert all(np.array_equal(loaded.params[k], v) for k, v in checkpoint.params.items())
        assert checkpoint.to_bytes() == loaded.to_bytes()

    def test_explicit_architecture_mismatch(self, tmp_path):
        self.make().save(tmp_path / "checkpoint.bin")
        with pytest.raises(CheckpointMismatchError, match="latent_dim"):
            ModelCheckpoint.load(tmp_path / "checkpoint.bin", expected=ModelConfig(latent_dim=8))

    def test_unset_keys_are_not_compared(self, tmp_path):
        self.make().save(tmp_path / "checkpoint.bin")
        loaded = ModelCheckpoint.load(tmp_path / "checkpoint.bin", expected=ModelConfig(latent_dim=4, max_epochs=3))
        assert loaded.config.d_model == 8

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(DataValidationError):
            ModelCheckpoint.load(tmp_path / "nope.bin")

"""
On-disk formats: NDJSON corpus, binary array container and atomic outputs
"""

import json
import logging
import os
import shutil
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .errors import DataValidationError
from .models import ConditionTag, CtgRecord, Group, RecordInfo, SegmentSet

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CONTAINER_MAGIC = b"FHRVAE01"
CORPUS_KIND = "ctg-corpus"
SEGMENTS_KIND = "segments"
CHECKPOINT_KIND = "checkpoint"

_DTYPES = {"<f8": np.float64, "<f4": np.float32, "<i1": np.int8, "<i8": np.int64}


def _dumps(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


@contextmanager
def atomic_output_dir(out: Path) -> Iterator[Path]:
    """
    Stage files in a sibling temp directory and move them into `out` only
    when the block finishes without raising. Nothing is left behind on error.
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        yield staging
        out.mkdir(parents=True, exist_ok=True)
        for item in sorted(staging.iterdir()):
            os.replace(item, out / item.name)
        logger.info(f"Wrote outputs to {out}")
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_json(payload: Any, path: Path) -> None:
    atomic_write_bytes(path, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def read_json(path: Path) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise DataValidationError(f"file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataValidationError(f"{path}: {e.msg}", line=e.lineno) from e


def write_frame(frame: pd.DataFrame, path: Path) -> None:
    atomic_write_bytes(path, frame.to_csv(index=False, lineterminator="\n").encode("utf-8"))


# Array container: magic, little-endian u64 header length, sorted JSON header,
# then each array's raw little-endian bytes at the offset its header entry names.

def encode_container(kind: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    entries: List[Dict[str, Any]] = []
    blobs: List[bytes] = []
    offset = 0
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name])
        dtype = array.dtype.newbyteorder("<")
        if dtype.str not in _DTYPES:
            raise DataValidationError(f"array {name} has unsupported dtype {array.dtype}")
        blob = array.astype(dtype, copy=False).tobytes(order="C")
        entries.append(
            {"name": name, "dtype": dtype.str, "shape": list(array.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = _dumps(
        {"format_version": FORMAT_VERSION, "kind": kind, "meta": dict(meta), "arrays": entries}
    ).encode("utf-8")
    return CONTAINER_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode_container(payload: bytes, kind: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    prefix = len(CONTAINER_MAGIC) + 8
    if len(payload) < prefix or payload[: len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise DataValidationError("not an fhrvae container (bad magic)")
    (header_len,) = struct.unpack("<Q", payload[len(CONTAINER_MAGIC):prefix])
    try:
        header = json.loads(payload[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataValidationError(f"container header is not valid JSON: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise DataValidationError(f"unsupported format_version {header.get('format_version')}")
    if header.get("kind") != kind:
        raise DataValidationError(f"expected a {kind} container, found {header.get('kind')}")
    body = payload[prefix + header_len:]
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start, size = entry["offset"], entry["nbytes"]
        if start + size > len(body) or entry["dtype"] not in _DTYPES:
            raise DataValidationError(f"array {entry['name']} is truncated or has an unknown dtype")
        raw = np.frombuffer(body[start:start + size], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = raw.reshape(entry["shape"]).astype(_DTYPES[entry["dtype"]])
    return header["meta"], arrays


def save_container(path: Path, kind: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_container(kind, meta, arrays))


def load_container(path: Path, kind: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        payload = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise DataValidationError(f"file not found: {path}") from e
    return decode_container(payload, kind)


def corpus_lines(records: Sequence[CtgRecord]) -> List[str]:
    header = {"format_version": FORMAT_VERSION, "kind": CORPUS_KIND, "count": len(records)}
    lines = [_dumps(header)]
    lines.extend(_dumps(record.model_dump(mode="json")) for record in records)
    return lines


def write_corpus(records: Sequence[CtgRecord], path: Path) -> None:
    atomic_write_bytes(path, ("\n".join(corpus_lines(records)) + "\n").encode("utf-8"))
    logger.info(f"Wrote {len(records)} records to {path}")


def read_corpus(path: Path) -> List[CtgRecord]:
    """Parse an NDJSON corpus; malformed lines are reported by line number."""
    records: List[CtgRecord] = []
    seen = set()
    try:
        handle = open(path, "r", encoding="utf-8")
    except FileNotFoundError as e:
        raise DataValidationError(f"corpus not found: {path}") from e
    with handle:
        header_seen = False
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            if not header_seen:
                try:
                    header = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataValidationError(f"corpus header is not JSON: {e.msg}", line=number) from e
                if not isinstance(header, dict) or header.get("kind") != CORPUS_KIND:
                    raise DataValidationError("first line must be a ctg-corpus header", line=number)
                if header.get("format_version") != FORMAT_VERSION:
                    raise DataValidationError(
                        f"unsupported format_version {header.get('format_version')}", line=number
                    )
                header_seen = True
                continue
            try:
                record = CtgRecord.model_validate_json(line)
            except ValidationError as e:
                raise DataValidationError(f"invalid record: {e.errors()[0]['msg']}", line=number) from e
            if record.ctg_id in seen:
                raise DataValidationError(f"duplicate ctg_id {record.ctg_id}", line=number)
            seen.add(record.ctg_id)
            records.append(record)
    if not header_seen:
        raise DataValidationError(f"corpus {path} is empty")
    logger.info(f"Read {len(records)} records from {path}")
    return records


def save_segments(segments: SegmentSet, path: Path, meta: Mapping[str, Any]) -> None:
    info = {
        ctg_id: {
            "group": r.group.value,
            "conditions": [c.value for c in r.conditions],
            "gestational_age": r.gestational_age,
        }
        for ctg_id, r in sorted(segments.records.items())
    }
    payload_meta = dict(meta)
    payload_meta["parent_ids"] = [str(p) for p in segments.parent_ids]
    payload_meta["records"] = info
    arrays = {
        "start_offsets": segments.start_offsets.astype(np.float64),
        "values": segments.values.astype(np.float64),
        "mask": segments.mask.astype(np.int8),
        "labels": segments.labels.astype(np.int8),
    }
    save_container(path, SEGMENTS_KIND, payload_meta, arrays)
    logger.info(f"Wrote {len(segments)} segments to {path}")


def load_segments(path: Path) -> Tuple[SegmentSet, Dict[str, Any]]:
    meta, arrays = load_container(path, SEGMENTS_KIND)
    parent_ids = meta.pop("parent_ids", [])
    records_meta = meta.pop("records", {})
    records = {
        ctg_id: RecordInfo(
            ctg_id=ctg_id,
            group=Group(info["group"]),
            conditions=[ConditionTag(c) for c in info["conditions"]],
            gestational_age=float(info["gestational_age"]),
        )
        for ctg_id, info in records_meta.items()
    }
    if len(parent_ids) != arrays["labels"].shape[0]:
        raise DataValidationError("segment container parent_ids do not match array rows")
    segments = SegmentSet(
        parent_ids=np.array(parent_ids, dtype=object),
        start_offsets=arrays["start_offsets"],
        values=arrays["values"],
        mask=arrays["mask"],
        labels=arrays["labels"],
        records=records,
    )
    return segments, meta

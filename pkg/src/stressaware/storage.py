"""Dataset files, decision logs, and model/agent artifact containers.

Datasets and decision logs are line-delimited JSON with a schema header line:
diff-able, round-trip lossless (floats serialize via shortest round-trip
decimals), and versioned so future formats fail with a migration error
instead of a parse crash.

Model and agent artifacts use a single binary container: magic, JSON header,
a raw little-endian array block, and a SHA-256 checksum over everything. The
same training inputs always produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import DqnAgent
from .errors import (
    CorruptedModelError,
    DatasetFormatError,
    MigrationError,
    ParameterError,
)
from .features import (
    CONTEXT_ARITY,
    HRV_FEATURE_NAMES,
    FeatureVector,
    HrvFeatures,
)
from .models import TrainedClassifier
from .policies import DecisionRecord

DATASET_SCHEMA = "stressaware.dataset"
DATASET_VERSION = 1
LOG_SCHEMA = "stressaware.decision_log"
LOG_VERSION = 1

ARTIFACT_MAGIC = b"SAWARE01"
ARTIFACT_VERSION = 1


# ---------------------------------------------------------------------------
# Dataset records
# ---------------------------------------------------------------------------


@dataclass
class DatasetRecord:
    """One sensing interval: raw burst and/or extracted features, plus metadata."""

    subject_id: str
    timestamp: float
    raw_samples: list[float] | None = None
    sample_rate: float | None = None
    hrv: dict[str, float] | None = None
    context: list[float] | None = None
    label5: int | None = None
    source: str = "synthetic"

    def __post_init__(self):
        if self.raw_samples is None and self.hrv is None:
            raise ParameterError("record needs raw samples or features")
        if self.source not in ("synthetic", "imported"):
            raise ParameterError(f"unknown provenance {self.source!r}")
        if self.context is not None and len(self.context) != CONTEXT_ARITY:
            raise ParameterError(
                f"context must have arity {CONTEXT_ARITY}, got {len(self.context)}"
            )
        if self.label5 is not None and self.label5 not in (1, 2, 3, 4, 5):
            raise ParameterError(f"label5 must be in 1..5, got {self.label5}")

    def to_json_dict(self) -> dict:
        return {
            "subject": self.subject_id,
            "t": self.timestamp,
            "raw": self.raw_samples,
            "rate": self.sample_rate,
            "hrv": self.hrv,
            "context": self.context,
            "label5": self.label5,
            "source": self.source,
        }

    @classmethod
    def from_json_dict(cls, row: dict) -> "DatasetRecord":
        return cls(
            subject_id=row["subject"],
            timestamp=float(row["t"]),
            raw_samples=row.get("raw"),
            sample_rate=row.get("rate"),
            hrv=row.get("hrv"),
            context=row.get("context"),
            label5=row.get("label5"),
            source=row.get("source", "synthetic"),
        )

    def feature_vector(self) -> FeatureVector:
        if self.hrv is None:
            raise ParameterError("record carries no features")
        hrv = HrvFeatures(**{name: float(self.hrv[name]) for name in HRV_FEATURE_NAMES})
        context = None if self.context is None else np.asarray(self.context, dtype=float)
        return FeatureVector(subject_id=self.subject_id, timestamp=self.timestamp,
                             hrv=hrv, context=context, label5=self.label5)


def _write_jsonl(path, header: dict, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, allow_nan=False) + "\n")
        for row in rows:
            fh.write(json.dumps(row, allow_nan=False) + "\n")


def _read_jsonl(path, schema: str, version: int):
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(
                    f"{path.name}: malformed line {number}: {exc.msg}",
                    line_number=number,
                ) from exc
            if number == 1:
                if not isinstance(row, dict) or row.get("schema") != schema:
                    raise DatasetFormatError(
                        f"{path.name}: line 1 is not a {schema} header",
                        line_number=1,
                    )
                if int(row.get("version", 0)) > version:
                    raise MigrationError(
                        f"{path.name} has schema version {row['version']}; "
                        f"this build supports up to {version}"
                    )
                continue
            rows.append((number, row))
    return rows


def write_dataset(records: list[DatasetRecord], path) -> None:
    header = {"schema": DATASET_SCHEMA, "version": DATASET_VERSION}
    _write_jsonl(path, header, (r.to_json_dict() for r in records))


def read_dataset(path) -> list[DatasetRecord]:
    out = []
    for number, row in _read_jsonl(path, DATASET_SCHEMA, DATASET_VERSION):
        try:
            out.append(DatasetRecord.from_json_dict(row))
        except (KeyError, TypeError, ParameterError) as exc:
            raise DatasetFormatError(
                f"bad dataset record on line {number}: {exc}", line_number=number
            ) from exc
    return out


def write_decision_log(records: list[DecisionRecord], path) -> None:
    header = {"schema": LOG_SCHEMA, "version": LOG_VERSION}
    _write_jsonl(path, header, (r.to_json_dict() for r in records))


def read_decision_log(path) -> list[DecisionRecord]:
    out = []
    for number, row in _read_jsonl(path, LOG_SCHEMA, LOG_VERSION):
        try:
            out.append(DecisionRecord.from_json_dict(row))
        except (KeyError, TypeError) as exc:
            raise DatasetFormatError(
                f"bad log record on line {number}: {exc}", line_number=number
            ) from exc
    return out


# ---------------------------------------------------------------------------
# Binary artifact container
# ---------------------------------------------------------------------------


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    """Deterministic little-endian encoding, names in sorted order."""
    chunks = [struct.pack(">I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.str  # e.g. '<f8'
        chunks.append(struct.pack(">H", len(name)))
        chunks.append(name.encode("ascii"))
        chunks.append(struct.pack(">H", len(dtype)))
        chunks.append(dtype.encode("ascii"))
        chunks.append(struct.pack(">B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack(">Q", dim))
        data = arr.tobytes()
        chunks.append(struct.pack(">Q", len(data)))
        chunks.append(data)
    return b"".join(chunks)


def _unpack_arrays(blob: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        piece = view[pos:pos + n]
        if len(piece) != n:
            raise CorruptedModelError("artifact array block truncated")
        pos += n
        return piece

    (count,) = struct.unpack(">I", take(4))
    for _ in range(count):
        (name_len,) = struct.unpack(">H", take(2))
        name = bytes(take(name_len)).decode("ascii")
        (dtype_len,) = struct.unpack(">H", take(2))
        dtype = bytes(take(dtype_len)).decode("ascii")
        (ndim,) = struct.unpack(">B", take(1))
        shape = tuple(struct.unpack(">Q", take(8))[0] for _ in range(ndim))
        (nbytes,) = struct.unpack(">Q", take(8))
        out[name] = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(shape).copy()
    return out


def _write_container(path, kind: str, header_meta: dict,
                     arrays: dict[str, np.ndarray]) -> None:
    header = {
        "format_version": ARTIFACT_VERSION,
        "kind": kind,
        "meta": header_meta,
    }
    header_bytes = json.dumps(header, sort_keys=True, allow_nan=False).encode("utf-8")
    array_bytes = _pack_arrays(arrays)
    body = (
        ARTIFACT_MAGIC
        + struct.pack(">I", len(header_bytes))
        + header_bytes
        + struct.pack(">Q", len(array_bytes))
        + array_bytes
    )
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + digest)


def _read_container(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(ARTIFACT_MAGIC) + 4 + 8 + 32:
        raise CorruptedModelError(f"{path}: too short to be an artifact")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptedModelError(f"{path}: checksum mismatch")
    if body[:8] != ARTIFACT_MAGIC:
        raise CorruptedModelError(f"{path}: bad magic")
    pos = 8
    (header_len,) = struct.unpack(">I", body[pos:pos + 4])
    pos += 4
    header = json.loads(body[pos:pos + header_len].decode("utf-8"))
    pos += header_len
    if int(header.get("format_version", 0)) > ARTIFACT_VERSION:
        raise MigrationError(
            f"{path}: artifact format {header['format_version']} is newer than "
            f"supported version {ARTIFACT_VERSION}"
        )
    (array_len,) = struct.unpack(">Q", body[pos:pos + 8])
    pos += 8
    arrays = _unpack_arrays(body[pos:pos + array_len])
    return header["kind"], header["meta"], arrays


def save_model(artifact: TrainedClassifier | DqnAgent, path) -> None:
    """Persist a classifier or agent as a versioned, checksummed container."""
    if isinstance(artifact, TrainedClassifier):
        _write_container(path, "classifier", artifact.to_payload(), {})
    elif isinstance(artifact, DqnAgent):
        _write_container(path, "agent", artifact.metadata(), artifact.arrays())
    else:
        raise ParameterError(f"cannot save object of type {type(artifact).__name__}")


def load_model(path) -> TrainedClassifier | DqnAgent:
    """Load an artifact; checksum and format version are verified first."""
    kind, meta, arrays = _read_container(path)
    if kind == "classifier":
        return TrainedClassifier.from_payload(meta)
    if kind == "agent":
        return DqnAgent.restore(meta, arrays)
    raise CorruptedModelError(f"{path}: unknown artifact kind {kind!r}")

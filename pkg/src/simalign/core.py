"""Domain types and on-disk formats shared by every pipeline stage.

Binary matrices (``SAMM``) and embeddings (``SAME``) share one layout::

    magic    4 bytes   b"SAMM" / b"SAME"
    version  1 byte    1
    dtype    1 byte    0 (float32)
    rows     uint32 LE
    cols     uint32 LE
    payload  rows*cols float32 LE, row-major

Video and model ids for embeddings live in a JSON manifest, not in the binary.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MATRIX_MAGIC = b"SAMM"
EMBEDDING_MAGIC = b"SAME"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0
HEADER = struct.Struct("<4sBBII")
HEADER_SIZE = HEADER.size  # 14

SEGMENT_FIELDS = ["query_id", "ref_id", "q_start", "q_end", "r_start", "r_end"]
PREDICTION_FIELDS = SEGMENT_FIELDS + ["score"]

UNIT_NORM_TOL = 1e-5
LOAD_NORM_TOL = 1e-4


class FormatError(ValueError):
    """Raised when a binary artifact cannot be decoded."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class TruncatedError(FormatError):
    code = "truncated"


class ShapeMismatchError(FormatError):
    code = "shape_mismatch"


class UnsupportedFormatError(FormatError):
    code = "unsupported"


class ValidationError(ValueError):
    """A value violates a domain invariant."""


class CsvFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


def _as_matrix(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def row_norms_ok(frames: np.ndarray, tol: float = UNIT_NORM_TOL) -> np.ndarray:
    """Per-row flag: unit norm within ``tol`` or exactly zero (padding)."""
    norms = np.linalg.norm(frames, axis=1)
    zero = ~np.any(frames != 0.0, axis=1)
    return zero | (np.abs(norms - 1.0) <= tol)


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    video_id: str
    model_id: str
    frames: np.ndarray

    def __post_init__(self):
        frames = _as_matrix(self.frames)
        if frames.shape[0] < 1 or frames.shape[1] < 2:
            raise ValidationError(f"embedding shape {frames.shape} needs T>=1, D>=2")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("non-finite embedding values")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def validate(self, tol: float = UNIT_NORM_TOL) -> None:
        ok = row_norms_ok(self.frames, tol)
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            norm = float(np.linalg.norm(self.frames[bad]))
            raise ValidationError(f"{self.video_id}: row {bad} has norm {norm:.6g}")


@dataclass(frozen=True, eq=False)
class _PairMatrix:
    query_id: str
    ref_id: str
    values: np.ndarray
    # (Q, R) before canvas fitting; None means values are already in seconds.
    orig_shape: tuple[int, int] | None = None

    def __post_init__(self):
        values = _as_matrix(self.values)
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError("matrix must be at least 1x1")
        if not np.all(np.isfinite(values)):
            raise ValidationError("non-finite matrix entries")
        object.__setattr__(self, "values", values)
        if self.orig_shape is not None:
            object.__setattr__(self, "orig_shape", (int(self.orig_shape[0]), int(self.orig_shape[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.orig_shape if self.orig_shape is not None else self.values.shape

    @property
    def pair(self) -> tuple[str, str]:
        return (self.query_id, self.ref_id)


class SimilarityMatrix(_PairMatrix):
    def __post_init__(self):
        super().__post_init__()
        if self.values.size and (self.values.min() < -1 - 1e-6 or self.values.max() > 1 + 1e-6):
            raise ValidationError("similarity entries must lie in [-1, 1]")


class ScoreMatrix(_PairMatrix):
    def __post_init__(self):
        super().__post_init__()
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValidationError("score entries must lie in [0, 1]")


@dataclass(frozen=True)
class GroundTruthSegment:
    query_id: str
    ref_id: str
    q_start: float
    q_end: float
    r_start: float
    r_end: float

    def __post_init__(self):
        for name in ("q_start", "q_end", "r_start", "r_end"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValidationError(f"{name} is not finite")
            object.__setattr__(self, name, v)
        if not self.q_start < self.q_end:
            raise ValidationError(f"q_start {self.q_start} >= q_end {self.q_end}")
        if not self.r_start < self.r_end:
            raise ValidationError(f"r_start {self.r_start} >= r_end {self.r_end}")

    @property
    def pair(self) -> tuple[str, str]:
        return (self.query_id, self.ref_id)


@dataclass(frozen=True)
class SegmentPrediction(GroundTruthSegment):
    score: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        s = float(self.score)
        if not math.isfinite(s):
            raise ValidationError("score is not finite")
        object.__setattr__(self, "score", s)


# ---------------------------------------------------------------------------
# binary formats
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _encode(magic: bytes, values: np.ndarray) -> bytes:
    rows, cols = values.shape
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return HEADER.pack(magic, FORMAT_VERSION, DTYPE_FLOAT32, rows, cols) + payload


def _decode(magic: bytes, data: bytes) -> np.ndarray:
    if len(data) < 4 or data[:4] != magic:
        if len(data) < 4 and magic.startswith(data):
            raise TruncatedError("truncated header")
        raise BadMagicError("bad magic")
    if len(data) < HEADER_SIZE:
        raise TruncatedError("truncated header")
    _, version, dtype, rows, cols = HEADER.unpack_from(data)
    if version != FORMAT_VERSION or dtype != DTYPE_FLOAT32:
        raise UnsupportedFormatError(f"unsupported version/dtype {version}/{dtype}")
    expected = rows * cols * 4
    payload = data[HEADER_SIZE:]
    if len(payload) < expected:
        raise TruncatedError(f"truncated payload: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise ShapeMismatchError(f"payload of {len(payload)} bytes does not match {rows}x{cols}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


def save_matrix(m: SimilarityMatrix | ScoreMatrix, path) -> None:
    atomic_write_bytes(path, _encode(MATRIX_MAGIC, m.values))


def load_matrix(path, kind: str = "similarity", query_id: str = "", ref_id: str = ""):
    """Load a ``SAMM`` file as a similarity (default) or score matrix."""
    values = _decode(MATRIX_MAGIC, Path(path).read_bytes())
    cls = {"similarity": SimilarityMatrix, "score": ScoreMatrix}[kind]
    return cls(query_id, ref_id, values)


def save_embeddings(seq: EmbeddingSequence, path) -> None:
    atomic_write_bytes(path, _encode(EMBEDDING_MAGIC, seq.frames))


def load_embeddings(path, video_id: str = "", model_id: str = "") -> EmbeddingSequence:
    frames = _decode(EMBEDDING_MAGIC, Path(path).read_bytes())
    seq = EmbeddingSequence(video_id or Path(path).stem, model_id, frames)
    seq.validate(LOAD_NORM_TOL)
    return seq


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    model: str
    path: str
    num_frames: int
    role: str | None = None

    def to_json(self) -> dict:
        d = {"id": self.id, "model": self.model, "path": self.path, "num_frames": self.num_frames}
        if self.role is not None:
            d["role"] = self.role
        return d


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    doc = {"videos": [e.to_json() for e in entries]}
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return [
            ManifestEntry(str(v["id"]), str(v["model"]), str(v["path"]), int(v["num_frames"]), v.get("role"))
            for v in doc["videos"]
        ]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed manifest {path}: {exc}") from exc


def load_manifest_embeddings(path) -> dict[tuple[str, str], EmbeddingSequence]:
    """Load every (video_id, model_id) listed in a manifest; paths are manifest-relative."""
    base = Path(path).parent
    out = {}
    for e in read_manifest(path):
        seq = load_embeddings(base / e.path, e.id, e.model)
        if seq.num_frames != e.num_frames:
            raise ValidationError(f"{e.id}/{e.model}: manifest says {e.num_frames} frames, file has {seq.num_frames}")
        out[(e.id, e.model)] = seq
    return out


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_segments_csv(segments: Sequence[GroundTruthSegment], path, with_score: bool | None = None) -> None:
    if with_score is None:
        with_score = bool(segments) and all(isinstance(s, SegmentPrediction) for s in segments)
    fields = PREDICTION_FIELDS if with_score else SEGMENT_FIELDS
    lines = [",".join(fields)]
    for s in segments:
        row = [s.query_id, s.ref_id, _fmt(s.q_start), _fmt(s.q_end), _fmt(s.r_start), _fmt(s.r_end)]
        if with_score:
            row.append(_fmt(s.score))
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_segments_csv(path) -> list[GroundTruthSegment]:
    """Read ground truth (6 columns) or predictions (7 columns, with score)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(1, "missing header") from None
        if header == SEGMENT_FIELDS:
            cls = GroundTruthSegment
        elif header == PREDICTION_FIELDS:
            cls = SegmentPrediction
        else:
            raise CsvFormatError(1, f"unexpected header {','.join(header)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                nums = [float(x) for x in row[2:]]
                out.append(cls(row[0], row[1], *nums))
            except ValueError as exc:
                raise CsvFormatError(lineno, str(exc)) from None
        return out


def write_pairs_csv(pairs: Iterable[tuple[str, str]], path) -> None:
    lines = ["query_id,ref_id"] + [f"{q},{r}" for q, r in pairs]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_pairs_csv(path) -> list[tuple[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["query_id", "ref_id"]:
            raise CsvFormatError(1, "expected header query_id,ref_id")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise CsvFormatError(lineno, f"expected 2 fields, got {len(row)}")
            out.append((row[0], row[1]))
        return out

"""Embedding file format, dataset manifests, pooling, and fold construction.

EMB1 file layout (little-endian, 28-byte header):

    bytes 0..3    magic "EMB1"
    bytes 4..7    u32 version, must be 1
    bytes 8..11   u32 dtype code, must be 1 (float32)
    bytes 12..19  u64 row count
    bytes 20..27  u64 column count
    bytes 28..    rows * cols float32 values, row-major

Dataset manifests are JSON lines, one recording per line, with exactly the
fields of ManifestEntry. Unknown fields are rejected so that pipeline bugs
surface at load time rather than as silent misreads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyInputError,
    FormatError,
    InsufficientSpeakersError,
    ManifestError,
)

EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1
EMB1_DTYPE_F32 = 1
EMB1_HEADER = struct.Struct("<4sIIQQ")
EMB1_HEADER_SIZE = EMB1_HEADER.size  # 28 bytes

MANIFEST_FIELDS = ("recording_id", "speaker_id", "target_word", "correct",
                   "embedding_path", "frames", "dim")


def write_embedding_file(path, m: np.ndarray) -> None:
    """Write a matrix as an EMB1 file; float32 storage, row-major."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise FormatError(f"embedding matrix must be 2-D and nonempty, got shape {m.shape}")
    data = np.ascontiguousarray(m, dtype=np.float32)
    if not np.isfinite(data).all():
        raise FormatError("embedding matrix contains non-finite values")
    header = EMB1_HEADER.pack(EMB1_MAGIC, EMB1_VERSION, EMB1_DTYPE_F32,
                              data.shape[0], data.shape[1])
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())


def read_embedding_header(path) -> tuple[int, int]:
    """Validate the header only and return (rows, cols)."""
    with open(path, "rb") as f:
        raw = f.read(EMB1_HEADER_SIZE)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> tuple[int, int]:
    if len(raw) < EMB1_HEADER_SIZE:
        raise FormatError(f"{path}: header truncated to {len(raw)} bytes", offset=len(raw))
    magic, version, dtype, rows, cols = EMB1_HEADER.unpack(raw)
    if magic != EMB1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != EMB1_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if dtype != EMB1_DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}", offset=8)
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: rows={rows} cols={cols} must both be >= 1", offset=12)
    return int(rows), int(cols)


def read_embedding_file(path) -> np.ndarray:
    """Read an EMB1 file back as a float32 matrix, bitwise-identical to write."""
    with open(path, "rb") as f:
        raw = f.read()
    rows, cols = _parse_header(raw[:EMB1_HEADER_SIZE], path)
    expected = rows * cols * 4
    payload = raw[EMB1_HEADER_SIZE:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for {rows}x{cols}",
            offset=EMB1_HEADER_SIZE)
    m = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32, copy=True)
    if not np.isfinite(m).all():
        raise FormatError(f"{path}: payload contains non-finite values", offset=EMB1_HEADER_SIZE)
    return m


def pool_mean(frames: np.ndarray) -> np.ndarray:
    """Column-wise mean of a T x D frame matrix as a 1 x D row."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise EmptyInputError(f"cannot pool frames of shape {frames.shape}")
    return frames.mean(axis=0, keepdims=True)


def pool_first(frames: np.ndarray) -> np.ndarray:
    """First row of a T x D frame matrix as a 1 x D row."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise EmptyInputError(f"cannot pool frames of shape {frames.shape}")
    return frames[0:1].copy()


@dataclass(frozen=True)
class ManifestEntry:
    recording_id: str
    speaker_id: str
    target_word: str
    correct: bool
    embedding_path: str
    frames: int
    dim: int


@dataclass(frozen=True)
class Dataset:
    entries: tuple[ManifestEntry, ...]
    vocabulary: tuple[str, ...]
    speakers: tuple[str, ...]
    root: Path

    def entries_for_speakers(self, speakers) -> list[ManifestEntry]:
        wanted = set(speakers)
        return [e for e in self.entries if e.speaker_id in wanted]

    def frames_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.embedding_path

    def load_frames(self, entry: ManifestEntry) -> np.ndarray:
        return read_embedding_file(self.frames_path(entry))


def _validate_entry(obj: dict, line_no: int) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise ManifestError("manifest line is not a JSON object", line=line_no)
    unknown = set(obj) - set(MANIFEST_FIELDS)
    if unknown:
        raise ManifestError(f"unknown fields {sorted(unknown)}", line=line_no)
    missing = set(MANIFEST_FIELDS) - set(obj)
    if missing:
        raise ManifestError(f"missing fields {sorted(missing)}", line=line_no)
    if not isinstance(obj["recording_id"], str) or not obj["recording_id"]:
        raise ManifestError("recording_id must be a nonempty string", line=line_no)
    if not isinstance(obj["speaker_id"], str) or not obj["speaker_id"]:
        raise ManifestError("speaker_id must be a nonempty string", line=line_no)
    word = obj["target_word"]
    if not isinstance(word, str) or not word:
        raise ManifestError("target_word must be a nonempty string", line=line_no)
    if word != word.lower():
        raise ManifestError(f"target_word {word!r} must be lowercase", line=line_no)
    if not isinstance(obj["correct"], bool):
        raise ManifestError("correct must be a boolean", line=line_no)
    if not isinstance(obj["embedding_path"], str) or not obj["embedding_path"]:
        raise ManifestError("embedding_path must be a nonempty string", line=line_no)
    for key in ("frames", "dim"):
        if not isinstance(obj[key], int) or obj[key] < 1:
            raise ManifestError(f"{key} must be a positive integer", line=line_no)
    return ManifestEntry(**obj)


def load_dataset(manifest_path, check_files: bool = True) -> Dataset:
    """Load and validate a JSON-lines dataset manifest.

    Each referenced embedding file's header is checked against the declared
    (frames, dim). Vocabulary and speaker lists come out sorted, which fixes
    the class-index ordering used everywhere downstream.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries: list[ManifestEntry] = []
    seen_ids: dict[str, int] = {}
    with open(manifest_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON: {e.msg}", line=line_no) from e
            entry = _validate_entry(obj, line_no)
            if entry.recording_id in seen_ids:
                raise ManifestError(
                    f"duplicate recording_id {entry.recording_id!r} "
                    f"(first seen on line {seen_ids[entry.recording_id]})", line=line_no)
            seen_ids[entry.recording_id] = line_no
            if check_files:
                path = root / entry.embedding_path
                if not path.is_file():
                    raise ManifestError(f"embedding file missing: {path}", line=line_no)
                rows, cols = read_embedding_header(path)
                if (rows, cols) != (entry.frames, entry.dim):
                    raise ManifestError(
                        f"declared {entry.frames}x{entry.dim} but file holds {rows}x{cols}",
                        line=line_no)
            entries.append(entry)
    if not entries:
        raise ManifestError(f"{manifest_path}: manifest is empty")
    vocabulary = tuple(sorted({e.target_word for e in entries}))
    speakers = tuple(sorted({e.speaker_id for e in entries}))
    return Dataset(entries=tuple(entries), vocabulary=vocabulary, speakers=speakers, root=root)


@dataclass(frozen=True)
class FoldSpec:
    test_speaker: str
    val_speaker: str
    train_speakers: tuple[str, ...]
    seed: int


def loso_folds(dataset: Dataset, seed: int) -> list[FoldSpec]:
    """One fold per speaker as test; validation speaker sampled from the rest.

    Folds come back in lexicographic test-speaker order and are fully
    determined by the seed.
    """
    speakers = list(dataset.speakers)
    if len(speakers) < 3:
        raise InsufficientSpeakersError(
            f"leave-one-speaker-out needs >= 3 speakers, got {len(speakers)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0F01D]))
    folds = []
    for test in speakers:
        rest = [s for s in speakers if s != test]
        val = rest[int(rng.integers(len(rest)))]
        train = tuple(s for s in rest if s != val)
        folds.append(FoldSpec(test_speaker=test, val_speaker=val,
                              train_speakers=train, seed=seed))
    return folds

"""On-disk data model: manifests, trials, scores, embeddings and WAV audio.

Text formats are tab-separated UTF-8 with a fixed header line; the embedding
format is a little-endian binary layout (magic ``EMB1``) so round-trips are
bit-exact. All readers and writers are pure with respect to process state.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CorruptFile,
    DuplicateId,
    FormatError,
    IoError,
    ParseError,
    UnsupportedFormat,
)

MANIFEST_HEADER = ("id", "speaker", "path", "duration", "domain", "labeled")
DOMAINS = ("source", "target")


@dataclass(slots=True)
class UtteranceRecord:
    id: str
    speaker: Optional[str]
    path: str
    duration: float
    domain: str
    labeled: bool

    def __post_init__(self):
        if not self.id:
            raise ParseError("empty utterance id")
        if self.duration <= 0:
            raise ParseError(f"non-positive duration for {self.id!r}")
        if self.domain not in DOMAINS:
            raise ParseError(f"unknown domain {self.domain!r} for {self.id!r}")
        if self.labeled and self.speaker is None:
            raise ParseError(f"labeled utterance {self.id!r} without speaker")


@dataclass
class Manifest:
    records: list[UtteranceRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise DuplicateId(f"duplicate utterance id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self):
        return len(self.records)

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {rec.id: rec for rec in self.records}

    def speakers(self) -> set[str]:
        return {rec.speaker for rec in self.records if rec.speaker is not None}


@dataclass
class TrialList:
    trials: list[tuple[str, str, Optional[bool]]] = field(default_factory=list)

    def __post_init__(self):
        kinds = {t[2] is None for t in self.trials}
        if len(kinds) > 1:
            raise ParseError("mixed labeled and unlabeled trials")

    def __len__(self):
        return len(self.trials)

    @property
    def labeled(self) -> bool:
        return bool(self.trials) and self.trials[0][2] is not None

    def labels(self) -> list[bool]:
        if not self.labeled:
            raise ParseError("trial list carries no target labels")
        return [bool(t[2]) for t in self.trials]


@dataclass
class ScoreSet:
    entries: list[tuple[str, str, float]] = field(default_factory=list)

    def __post_init__(self):
        for e, t, s in self.entries:
            if not np.isfinite(s):
                raise ParseError(f"non-finite score for ({e!r}, {t!r})")

    def __len__(self):
        return len(self.entries)

    def scores(self) -> np.ndarray:
        return np.array([s for _, _, s in self.entries], dtype=np.float64)

    def pairs(self) -> list[tuple[str, str]]:
        return [(e, t) for e, t, _ in self.entries]


@dataclass
class EmbeddingSet:
    dim: int
    entries: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.dim < 1:
            raise FormatError("embedding dim must be positive")
        seen = set()
        for uid, vec in self.entries:
            if uid in seen:
                raise DuplicateId(f"duplicate embedding id {uid!r}")
            seen.add(uid)
            if vec.shape != (self.dim,):
                raise CorruptFile(f"vector for {uid!r} has shape {vec.shape}")
            if not np.all(np.isfinite(vec)):
                raise CorruptFile(f"non-finite vector for {uid!r}")

    def __len__(self):
        return len(self.entries)

    def ids(self) -> list[str]:
        return [uid for uid, _ in self.entries]

    def matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([vec for _, vec in self.entries])

    def lookup(self) -> dict[str, np.ndarray]:
        return dict(self.entries)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ParseError("waveform has no samples")

    def __len__(self):
        return len(self.samples)


# --- manifest ---

def read_manifest(path) -> Manifest:
    path = Path(path)
    lines = _read_text(path).splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise ParseError(f"bad manifest header in {path}", line=1)
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 6:
            raise ParseError(f"expected 6 columns, got {len(cols)}", line=lineno)
        uid, speaker, upath, duration, domain, labeled = cols
        try:
            records.append(
                UtteranceRecord(
                    id=uid,
                    speaker=speaker or None,
                    path=upath,
                    duration=float(duration),
                    domain=domain,
                    labeled=_parse_bool(labeled, lineno),
                )
            )
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        except ParseError as exc:
            raise ParseError(str(exc), line=lineno) from None
    return Manifest(records)


def write_manifest(manifest: Manifest, path) -> None:
    lines = ["\t".join(MANIFEST_HEADER)]
    for rec in manifest.records:
        lines.append(
            "\t".join(
                [
                    rec.id,
                    rec.speaker or "",
                    rec.path,
                    repr(rec.duration),
                    rec.domain,
                    "1" if rec.labeled else "0",
                ]
            )
        )
    _write_text(path, "\n".join(lines) + "\n")


def _parse_bool(text: str, lineno: int) -> bool:
    if text in ("1", "true", "True"):
        return True
    if text in ("0", "false", "False"):
        return False
    raise ParseError(f"bad boolean {text!r}", line=lineno)


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# --- WAV audio ---

def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wav:
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            rate = wav.getframerate()
            nframes = wav.getnframes()
            if channels != 1:
                raise UnsupportedFormat(f"{path}: expected mono, got {channels} channels")
            if width != 2:
                raise UnsupportedFormat(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
            if rate != 16000:
                raise UnsupportedFormat(f"{path}: expected 16 kHz, got {rate} Hz")
            if wav.getcomptype() != "NONE":
                raise UnsupportedFormat(f"{path}: compressed WAV not supported")
            raw = wav.readframes(nframes)
    except wave.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise ParseError(f"{path}: truncated file") from exc
    if len(raw) != 2 * nframes:
        raise ParseError(f"{path}: truncated data chunk")
    values = np.frombuffer(raw, dtype="<i2")
    return Waveform(samples=values.astype(np.float64) / 32768.0, sample_rate=16000)


def write_wav(waveform: Waveform, path) -> None:
    """Inverse of read_wav for test fixtures; clips to the int16 range."""
    values = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as wav:
            wav.setnchannels(1)
            wav.setsampwidth(2)
            wav.setframerate(waveform.sample_rate)
            wav.writeframes(values.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --- embeddings (binary) ---

_EMB_MAGIC = b"EMB1"
_EMB_VERSION = 1


def write_embeddings(embedding_set: EmbeddingSet, path) -> None:
    parts = [
        _EMB_MAGIC,
        struct.pack("<HIQ", _EMB_VERSION, embedding_set.dim, len(embedding_set.entries)),
    ]
    for uid, vec in embedding_set.entries:
        raw_id = uid.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_id)))
        parts.append(raw_id)
        parts.append(np.asarray(vec, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_embeddings(path) -> EmbeddingSet:
    data = _read_bytes(path)
    if len(data) < 18 or data[:4] != _EMB_MAGIC:
        raise FormatError(f"{path}: bad magic or truncated header")
    version, dim, count = struct.unpack_from("<HIQ", data, 4)
    if version != _EMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 18
    entries = []
    for _ in range(count):
        if offset + 2 > len(data):
            raise CorruptFile(f"{path}: truncated record header")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        end = offset + id_len + 4 * dim
        if end > len(data):
            raise CorruptFile(f"{path}: truncated record body")
        uid = data[offset : offset + id_len].decode("utf-8")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset + id_len).copy()
        offset = end
        entries.append((uid, vec))
    if offset != len(data):
        raise CorruptFile(f"{path}: trailing bytes after last record")
    return EmbeddingSet(dim=dim, entries=entries)


# --- trials and scores ---

def read_trials(path) -> TrialList:
    trials: list[tuple[str, str, Optional[bool]]] = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) == 2:
            trials.append((cols[0], cols[1], None))
        elif len(cols) == 3:
            if cols[0] not in ("0", "1"):
                raise ParseError(f"bad trial label {cols[0]!r}", line=lineno)
            trials.append((cols[1], cols[2], cols[0] == "1"))
        else:
            raise ParseError(f"expected 2 or 3 columns, got {len(cols)}", line=lineno)
    try:
        return TrialList(trials)
    except ParseError:
        raise ParseError(f"{path}: mixed labeled and unlabeled rows") from None


def write_trials(trial_list: TrialList, path) -> None:
    lines = []
    for enroll, test, target in trial_list.trials:
        if target is None:
            lines.append(f"{enroll}\t{test}")
        else:
            lines.append(f"{1 if target else 0}\t{enroll}\t{test}")
    _write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_scores(path) -> ScoreSet:
    entries = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 3:
            raise ParseError(f"expected 3 columns, got {len(cols)}", line=lineno)
        try:
            entries.append((cols[0], cols[1], float(cols[2])))
        except ValueError:
            raise ParseError(f"bad score {cols[2]!r}", line=lineno) from None
    return ScoreSet(entries)


def write_scores(score_set: ScoreSet, path) -> None:
    lines = [f"{e}\t{t}\t{repr(s)}" for e, t, s in score_set.entries]
    _write_text(path, "\n".join(lines) + ("\n" if lines else ""))

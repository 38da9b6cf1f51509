"""On-disk and in-memory representation of embeddings, tracklets, detections,
and ground-truth tracks.

File formats:

* ``manifest.jsonl`` -- one JSON object per line, discriminated by
  ``"kind": "header" | "tracklet" | "record"``. The header carries
  ``schema_version`` and ``embedding_dim`` and, when vectors live in a
  sidecar, the sidecar file name.
* ``vectors.bin`` -- little-endian binary sidecar: magic ``TLV1``, u32
  dimension, u64 row count, then ``count`` rows of ``dim`` float32 values.
  Row ``i`` belongs to the i-th record line of the manifest.
* Detections / ground truth -- MOT Challenge text, one line
  ``frame,id,x,y,w,h,score,-1,-1,-1`` (``id == -1`` for raw detections).

Vectors are stored as float32 on disk and promoted to float64 in memory.
Ingestion L2-normalizes any row whose norm is off unity by more than 1e-6;
rows already inside that tolerance are kept bit-exact so that
``load(save(m))`` is a fixed point.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateKey,
    ManifestError,
    MissingTracklet,
    NonFiniteValue,
    ZeroVector,
)

SCHEMA_VERSION = 1
DEFAULT_EMBEDDING_DIM = 256
SPLITS = ("train", "val", "test", "distractor")

_VEC_MAGIC = b"TLV1"
_NORM_TOLERANCE = 1e-6


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Return ``v / ||v||`` as float64. Raises ZeroVector on zero norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not math.isfinite(norm):
        raise ZeroVector("cannot normalize a zero or non-finite vector")
    return v / norm


class EncounterKey(NamedTuple):
    """All recordings at one camera location within one calendar day."""

    location_id: str
    date: str


@dataclass(eq=False)
class EmbeddingRecord:
    """One L2-normalized feature vector tied to (tracklet, frame)."""

    record_id: int
    tracklet_id: str
    frame_index: int
    vector: np.ndarray
    confidence: Optional[float] = None
    crop_size: Optional[tuple[int, int]] = None  # (width, height), when known

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.tracklet_id == other.tracklet_id
            and self.frame_index == other.frame_index
            and self.confidence == other.confidence
            and self.crop_size == other.crop_size
            and np.array_equal(self.vector, other.vector)
        )


@dataclass(frozen=True)
class TrackletMeta:
    """Identity / encounter / location / time metadata of one tracklet."""

    tracklet_id: str
    video_id: str
    location_id: str
    date: str  # local calendar-day string, kept verbatim
    start_time: datetime
    end_time: datetime
    start_frame: int
    end_frame: int
    identity: Optional[str] = None
    social_group: Optional[str] = None
    split: str = "train"


def encounter_of(t: TrackletMeta) -> EncounterKey:
    return EncounterKey(t.location_id, t.date)


@dataclass(eq=False)
class DetectionRecord:
    """One detector output box, optionally with an appearance embedding."""

    video_id: str
    frame_index: int
    bbox: tuple[float, float, float, float]  # x, y, w, h in pixels
    score: float
    embedding: Optional[np.ndarray] = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DetectionRecord):
            return NotImplemented
        same_emb = (self.embedding is None) == (other.embedding is None) and (
            self.embedding is None or np.array_equal(self.embedding, other.embedding)
        )
        return (
            self.video_id == other.video_id
            and self.frame_index == other.frame_index
            and self.bbox == other.bbox
            and self.score == other.score
            and same_emb
        )


@dataclass
class GroundTruthTrack:
    """Dense per-frame annotation of one object."""

    video_id: str
    gt_track_id: int
    boxes: dict[int, tuple[float, float, float, float]] = field(default_factory=dict)


@dataclass(eq=False)
class Manifest:
    """A validated collection of tracklets and their embedding records."""

    schema_version: int
    embedding_dim: int
    records: list[EmbeddingRecord]
    tracklets: list[TrackletMeta]

    def __post_init__(self) -> None:
        self.tracklet_by_id: dict[str, TrackletMeta] = {
            t.tracklet_id: t for t in self.tracklets
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Manifest):
            return NotImplemented
        return (
            self.schema_version == other.schema_version
            and self.embedding_dim == other.embedding_dim
            and self.tracklets == other.tracklets
            and self.records == other.records
        )

    def records_for(self, tracklet_id: str) -> list[EmbeddingRecord]:
        return [r for r in self.records if r.tracklet_id == tracklet_id]

    def encounter_for_record(self, record: EmbeddingRecord) -> EncounterKey:
        return encounter_of(self.tracklet_by_id[record.tracklet_id])


# ---------------------------------------------------------------------------
# binary sidecar
# ---------------------------------------------------------------------------

def write_vectors(path: Path | str, matrix: np.ndarray) -> None:
    """Write an (N, D) matrix as the TLV1 float32 sidecar format."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DimensionMismatch(f"expected 2-D matrix, got shape {matrix.shape}")
    count, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_VEC_MAGIC)
        fh.write(struct.pack("<IQ", dim, count))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_vectors(path: Path | str) -> np.ndarray:
    """Read a TLV1 sidecar into an (N, D) float32 matrix."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _VEC_MAGIC:
            raise ManifestError(f"{path}: bad magic {magic!r}, expected {_VEC_MAGIC!r}")
        dim, count = struct.unpack("<IQ", fh.read(12))
        body = fh.read()
    expected = count * dim * 4
    if len(body) != expected:
        raise ManifestError(
            f"{path}: sidecar body has {len(body)} bytes, expected {expected}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(count, dim)


def _ingest_vector(raw: np.ndarray, dim: int, where: str) -> np.ndarray:
    v = np.asarray(raw, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != dim:
        raise DimensionMismatch(f"{where}: vector has length {v.shape}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteValue(f"{where}: vector contains non-finite values")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ZeroVector(f"{where}: zero vector cannot be normalized")
    if abs(norm - 1.0) > _NORM_TOLERANCE:
        v = v / norm
    return v


# ---------------------------------------------------------------------------
# manifest JSONL
# ---------------------------------------------------------------------------

def _tracklet_from_json(obj: dict) -> TrackletMeta:
    return TrackletMeta(
        tracklet_id=str(obj["tracklet_id"]),
        video_id=str(obj["video_id"]),
        location_id=str(obj["location_id"]),
        date=str(obj["date"]),
        start_time=datetime.fromisoformat(obj["start_time"]),
        end_time=datetime.fromisoformat(obj["end_time"]),
        start_frame=int(obj["start_frame"]),
        end_frame=int(obj["end_frame"]),
        identity=obj.get("identity"),
        social_group=obj.get("social_group"),
        split=str(obj["split"]),
    )


def _tracklet_to_json(t: TrackletMeta) -> dict:
    return {
        "kind": "tracklet",
        "tracklet_id": t.tracklet_id,
        "video_id": t.video_id,
        "location_id": t.location_id,
        "date": t.date,
        "start_time": t.start_time.isoformat(),
        "end_time": t.end_time.isoformat(),
        "start_frame": t.start_frame,
        "end_frame": t.end_frame,
        "identity": t.identity,
        "social_group": t.social_group,
        "split": t.split,
    }


def load_manifest(path: Path | str) -> Manifest:
    """Load a JSONL manifest plus its vector sidecar (when referenced).

    Postconditions: all type invariants hold, vectors are unit-norm within
    1e-6, and records are sorted by (tracklet_id, frame_index).
    """
    path = Path(path)
    header: Optional[dict] = None
    tracklet_objs: list[dict] = []
    record_objs: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            kind = obj.get("kind")
            if kind == "header":
                if header is not None:
                    raise ManifestError(f"{path}:{lineno}: duplicate header line")
                header = obj
            elif kind == "tracklet":
                tracklet_objs.append(obj)
            elif kind == "record":
                record_objs.append(obj)
            else:
                raise ManifestError(f"{path}:{lineno}: unknown line kind {kind!r}")
    if header is None:
        raise ManifestError(f"{path}: missing header line")
    dim = int(header["embedding_dim"])
    schema_version = int(header["schema_version"])

    tracklets: list[TrackletMeta] = []
    seen_tids: set[str] = set()
    for obj in tracklet_objs:
        t = _tracklet_from_json(obj)
        if t.tracklet_id in seen_tids:
            raise DuplicateKey(f"duplicate tracklet_id {t.tracklet_id!r}")
        if t.start_frame > t.end_frame:
            raise ManifestError(
                f"tracklet {t.tracklet_id!r}: start_frame > end_frame"
            )
        if t.start_time > t.end_time:
            raise ManifestError(f"tracklet {t.tracklet_id!r}: start_time > end_time")
        if t.split not in SPLITS:
            raise ManifestError(f"tracklet {t.tracklet_id!r}: unknown split {t.split!r}")
        seen_tids.add(t.tracklet_id)
        tracklets.append(t)
    by_id = {t.tracklet_id: t for t in tracklets}

    sidecar: Optional[np.ndarray] = None
    needs_sidecar = any("vector" not in obj for obj in record_objs)
    if needs_sidecar:
        sidecar_name = header.get("vectors_file", "vectors.bin")
        sidecar = read_vectors(path.parent / sidecar_name)
        if sidecar.shape[1] != dim:
            raise DimensionMismatch(
                f"sidecar dimension {sidecar.shape[1]} != header dimension {dim}"
            )
        if sidecar.shape[0] != len(record_objs):
            raise ManifestError(
                f"sidecar has {sidecar.shape[0]} rows for {len(record_objs)} records"
            )

    records: list[EmbeddingRecord] = []
    seen_rids: set[int] = set()
    seen_keys: set[tuple[str, int]] = set()
    for row, obj in enumerate(record_objs):
        rid = int(obj["record_id"])
        tid = str(obj["tracklet_id"])
        frame = int(obj["frame_index"])
        where = f"record {rid}"
        if rid in seen_rids:
            raise DuplicateKey(f"duplicate record_id {rid}")
        if (tid, frame) in seen_keys:
            raise DuplicateKey(f"duplicate (tracklet_id, frame_index) = ({tid!r}, {frame})")
        if tid not in by_id:
            raise MissingTracklet(f"{where}: unknown tracklet_id {tid!r}")
        if frame < 0:
            raise ManifestError(f"{where}: negative frame_index")
        t = by_id[tid]
        if not (t.start_frame <= frame <= t.end_frame):
            raise ManifestError(
                f"{where}: frame_index {frame} outside tracklet span "
                f"[{t.start_frame}, {t.end_frame}]"
            )
        confidence = obj.get("confidence")
        if confidence is not None:
            confidence = float(confidence)
            if not (math.isfinite(confidence) and 0.0 <= confidence <= 1.0):
                raise ManifestError(f"{where}: confidence outside [0, 1]")
        crop = obj.get("crop_size")
        if crop is not None:
            crop = (int(crop[0]), int(crop[1]))
        raw = obj["vector"] if "vector" in obj else sidecar[row]
        vector = _ingest_vector(np.asarray(raw), dim, where)
        seen_rids.add(rid)
        seen_keys.add((tid, frame))
        records.append(
            EmbeddingRecord(
                record_id=rid,
                tracklet_id=tid,
                frame_index=frame,
                vector=vector,
                confidence=confidence,
                crop_size=crop,
            )
        )

    records.sort(key=lambda r: (r.tracklet_id, r.frame_index))
    return Manifest(
        schema_version=schema_version,
        embedding_dim=dim,
        records=records,
        tracklets=tracklets,
    )


def save_manifest(
    manifest: Manifest,
    path: Path | str,
    vectors: str = "sidecar",
    vectors_file: str = "vectors.bin",
) -> None:
    """Write a manifest as JSONL, with vectors inline or in a TLV1 sidecar.

    Record lines are emitted in (tracklet_id, frame_index) order; sidecar row
    i corresponds to the i-th record line.
    """
    if vectors not in ("sidecar", "inline"):
        raise ValueError(f"vectors must be 'sidecar' or 'inline', got {vectors!r}")
    path = Path(path)
    records = sorted(manifest.records, key=lambda r: (r.tracklet_id, r.frame_index))
    header: dict = {
        "kind": "header",
        "schema_version": manifest.schema_version,
        "embedding_dim": manifest.embedding_dim,
    }
    if vectors == "sidecar":
        header["vectors_file"] = vectors_file
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t in sorted(manifest.tracklets, key=lambda t: t.tracklet_id):
            fh.write(json.dumps(_tracklet_to_json(t), sort_keys=True) + "\n")
        for r in records:
            obj: dict = {
                "kind": "record",
                "record_id": r.record_id,
                "tracklet_id": r.tracklet_id,
                "frame_index": r.frame_index,
                "confidence": r.confidence,
                "crop_size": list(r.crop_size) if r.crop_size else None,
            }
            if vectors == "inline":
                obj["vector"] = [float(x) for x in r.vector]
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    if vectors == "sidecar":
        matrix = np.stack([r.vector for r in records]) if records else np.zeros(
            (0, manifest.embedding_dim)
        )
        write_vectors(path.parent / vectors_file, matrix)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    subject: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, subject: str, message: str) -> None:
        self.violations.append(Violation(kind, subject, message))

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]


def validate_manifest(m: Manifest, min_crop: Optional[int] = None) -> ValidationReport:
    """Report every invariant violation in ``m``; empty report iff valid."""
    report = ValidationReport()
    seen_tids: set[str] = set()
    for t in m.tracklets:
        subject = f"tracklet {t.tracklet_id}"
        if t.tracklet_id in seen_tids:
            report.add("DuplicateKey", subject, "duplicate tracklet_id")
        seen_tids.add(t.tracklet_id)
        if t.start_frame > t.end_frame:
            report.add("OrderViolation", subject, "start_frame > end_frame")
        if t.start_time > t.end_time:
            report.add("OrderViolation", subject, "start_time > end_time")
        if t.split not in SPLITS:
            report.add("SplitValue", subject, f"unknown split {t.split!r}")

    by_id = {t.tracklet_id: t for t in m.tracklets}
    seen_rids: set[int] = set()
    seen_keys: set[tuple[str, int]] = set()
    for r in m.records:
        subject = f"record {r.record_id}"
        if r.record_id in seen_rids:
            report.add("DuplicateKey", subject, "duplicate record_id")
        seen_rids.add(r.record_id)
        key = (r.tracklet_id, r.frame_index)
        if key in seen_keys:
            report.add(
                "DuplicateKey", subject, f"duplicate (tracklet_id, frame_index) {key}"
            )
        seen_keys.add(key)
        v = np.asarray(r.vector)
        if v.ndim != 1 or v.shape[0] != m.embedding_dim:
            report.add(
                "DimensionMismatch",
                subject,
                f"vector length {v.shape} != {m.embedding_dim}",
            )
        elif not np.all(np.isfinite(v)):
            report.add("NonFiniteValue", subject, "vector has non-finite entries")
        else:
            norm = float(np.linalg.norm(v))
            if abs(norm - 1.0) > _NORM_TOLERANCE:
                report.add("NormDrift", subject, f"norm {norm} off unity by >1e-6")
        if r.frame_index < 0:
            report.add("FrameRange", subject, "negative frame_index")
        if r.tracklet_id not in by_id:
            report.add("MissingTracklet", subject, f"unknown tracklet {r.tracklet_id!r}")
        else:
            t = by_id[r.tracklet_id]
            if not (t.start_frame <= r.frame_index <= t.end_frame):
                report.add(
                    "FrameRange",
                    subject,
                    f"frame {r.frame_index} outside [{t.start_frame}, {t.end_frame}]",
                )
        if r.confidence is not None and not (0.0 <= r.confidence <= 1.0):
            report.add("ConfidenceRange", subject, f"confidence {r.confidence}")
        if min_crop is not None and r.crop_size is not None:
            w, h = r.crop_size
            if w < min_crop or h < min_crop:
                report.add(
                    "SizeFilter",
                    subject,
                    f"crop {w}x{h} below minimum {min_crop}x{min_crop}",
                )
    return report


# ---------------------------------------------------------------------------
# MOT Challenge text format
# ---------------------------------------------------------------------------

def _parse_mot_line(line: str, where: str) -> tuple[int, int, float, float, float, float, float]:
    parts = line.split(",")
    if len(parts) < 7:
        raise ManifestError(f"{where}: expected >=7 comma-separated fields")
    frame = int(parts[0])
    obj_id = int(parts[1])
    x, y, w, h = (float(p) for p in parts[2:6])
    score = float(parts[6])
    return frame, obj_id, x, y, w, h, score


def load_mot_detections(
    path: Path | str,
    video_id: Optional[str] = None,
    embeddings_path: Optional[Path | str] = None,
) -> list[DetectionRecord]:
    """Read raw detections; optional TLV1 sidecar supplies one embedding per line."""
    path = Path(path)
    vid = video_id if video_id is not None else path.stem
    embeddings: Optional[np.ndarray] = None
    if embeddings_path is not None:
        raw = read_vectors(embeddings_path)
        embeddings = np.empty(raw.shape, dtype=np.float64)
        for i in range(raw.shape[0]):
            embeddings[i] = _ingest_vector(raw[i], raw.shape[1], f"detection row {i}")
    detections: list[DetectionRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            frame, _, x, y, w, h, score = _parse_mot_line(line, f"{path}:{lineno + 1}")
            if w <= 0 or h <= 0:
                raise ManifestError(f"{path}:{lineno + 1}: box has non-positive size")
            if not (math.isfinite(score) and 0.0 <= score <= 1.0):
                raise ManifestError(f"{path}:{lineno + 1}: score outside [0, 1]")
            emb = None
            if embeddings is not None:
                if len(detections) >= embeddings.shape[0]:
                    raise ManifestError(
                        f"{path}: more detection lines than embedding rows"
                    )
                emb = embeddings[len(detections)]
            detections.append(DetectionRecord(vid, frame, (x, y, w, h), score, emb))
    if embeddings is not None and len(detections) != embeddings.shape[0]:
        raise ManifestError(f"{path}: {len(detections)} detections vs "
                            f"{embeddings.shape[0]} embedding rows")
    return detections


def load_mot_tracks(path: Path | str, video_id: Optional[str] = None) -> list[GroundTruthTrack]:
    """Read an annotated MOT file (gt or predictions) grouped into tracks."""
    path = Path(path)
    vid = video_id if video_id is not None else path.stem
    tracks: dict[int, GroundTruthTrack] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            frame, obj_id, x, y, w, h, _ = _parse_mot_line(line, f"{path}:{lineno + 1}")
            track = tracks.setdefault(obj_id, GroundTruthTrack(vid, obj_id))
            if frame in track.boxes:
                raise DuplicateKey(
                    f"{path}:{lineno + 1}: track {obj_id} already has a box at frame {frame}"
                )
            track.boxes[frame] = (x, y, w, h)
    return [tracks[k] for k in sorted(tracks)]


def write_mot_file(
    path: Path | str,
    rows: Iterable[tuple[int, int, float, float, float, float, float]],
) -> None:
    """Write (frame, id, x, y, w, h, score) rows in MOT Challenge text form."""
    with open(path, "w", encoding="utf-8") as fh:
        for frame, obj_id, x, y, w, h, score in rows:
            fh.write(
                f"{frame},{obj_id},{x:.2f},{y:.2f},{w:.2f},{h:.2f},{score:.6f},-1,-1,-1\n"
            )


def tracks_to_rows(
    tracks: Sequence[GroundTruthTrack], score: float = 1.0
) -> list[tuple[int, int, float, float, float, float, float]]:
    rows = []
    for t in tracks:
        for frame in sorted(t.boxes):
            x, y, w, h = t.boxes[frame]
            rows.append((frame, t.gt_track_id, x, y, w, h, score))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows

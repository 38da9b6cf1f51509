"""Deterministic synthetic-scenario generators.

Every scenario is a pure function of its spec (seed included): identities
get mutually orthonormal unit centroids, records add isotropic Gaussian
noise and re-normalize, and optional per-encounter centroid drift models
appearance change between sightings. The closed-form expected cosine between
two noisy copies of a centroid is roughly 1 / (1 + sigma^2 * D), which is
how test margins are sized.

Constraint-inducing metadata is opt-in: same-group identities can share
videos with overlapping frame spans (frame rule), groups can be recorded
simultaneously at different sites (location rule), and identities can carry
social-group labels (group rule).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional, Sequence

import numpy as np

from .datamodel import (
    DetectionRecord,
    EmbeddingRecord,
    EncounterKey,
    GroundTruthTrack,
    Manifest,
    SCHEMA_VERSION,
    TrackletMeta,
    encounter_of,
)
from .errors import InvalidSpec
from .explain import PerturbedProbe, RelevanceMap

# ---------------------------------------------------------------------------
# re-identification scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReidScenarioSpec:
    """Layout of a synthetic identity population.

    Multi-encounter identities are assigned to train/val/test; distractors
    get exactly one encounter and the dedicated split.
    """

    dim: int = 64
    seed: int = 42
    n_train: int = 8
    n_val: int = 4
    n_test: int = 4
    n_distractors: int = 0
    encounters_per_identity: int = 2
    tracklets_per_encounter: int = 1
    frames_per_tracklet: int = 5
    noise: float = 0.05
    encounter_drift: float = 0.0
    n_social_groups: int = 0
    co_occurrence: bool = False
    cross_location_overlap: bool = False

    def validate(self) -> None:
        multi = self.n_train + self.n_val + self.n_test
        total = multi + self.n_distractors
        if multi < 2:
            raise InvalidSpec("need at least 2 multi-encounter identities")
        if self.encounters_per_identity < 2:
            raise InvalidSpec("multi-encounter identities need >= 2 encounters")
        if self.dim < total + 1:
            raise InvalidSpec(
                f"dim={self.dim} too small for {total} orthonormal centroids"
            )
        if self.tracklets_per_encounter < 1 or self.frames_per_tracklet < 1:
            raise InvalidSpec("tracklets and frames per tracklet must be >= 1")
        if self.noise < 0 or self.encounter_drift < 0:
            raise InvalidSpec("noise scales must be non-negative")
        if self.n_social_groups < 0 or self.n_social_groups > multi:
            raise InvalidSpec("n_social_groups must be in [0, multi identities]")


def _orthonormal_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))  # fix the sign convention for determinism
    return q[:n]


def _noisy_unit(rng: np.random.Generator, base: np.ndarray, sigma: float) -> np.ndarray:
    v = base + sigma * rng.standard_normal(base.shape[0]) if sigma > 0 else base.copy()
    return v / np.linalg.norm(v)


def gen_reid_scenario(spec: ReidScenarioSpec) -> tuple[Manifest, dict[str, str]]:
    """Build a manifest plus the tracklet -> identity truth map."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    multi = spec.n_train + spec.n_val + spec.n_test
    total = multi + spec.n_distractors
    centroids = _orthonormal_rows(rng, total, spec.dim)

    identities = [f"id{i:03d}" for i in range(total)]
    split_of: dict[str, str] = {}
    for i, ident in enumerate(identities):
        if i < spec.n_train:
            split_of[ident] = "train"
        elif i < spec.n_train + spec.n_val:
            split_of[ident] = "val"
        elif i < multi:
            split_of[ident] = "test"
        else:
            split_of[ident] = "distractor"

    group_of: dict[str, Optional[str]] = {ident: None for ident in identities}
    n_groups = max(spec.n_social_groups, 1) if spec.co_occurrence else spec.n_social_groups
    if n_groups > 0:
        for i in range(multi):
            ident = identities[i]
            group_of[ident] = f"G{i % n_groups}"

    tracklets: list[TrackletMeta] = []
    records: list[EmbeddingRecord] = []
    truth: dict[str, str] = {}
    tracklet_no = 0
    record_no = 0
    base_day = datetime(2021, 3, 1, 10, 0, 0)

    def group_index(ident: str) -> int:
        g = group_of[ident]
        return int(g[1:]) if g is not None else 0

    for i, ident in enumerate(identities):
        is_distractor = split_of[ident] == "distractor"
        n_enc = 1 if is_distractor else spec.encounters_per_identity
        for e in range(n_enc):
            if is_distractor:
                location = f"LD{i}"
                day = base_day + timedelta(days=90 + i)
            elif spec.cross_location_overlap:
                # groups share calendar days but sit at different sites
                location = f"L{group_index(ident)}"
                day = base_day + timedelta(days=e)
            else:
                location = f"L{group_index(ident)}e{e}"
                day = base_day + timedelta(days=e * (total + 2) + i)
            date = day.strftime("%Y-%m-%d")
            start_time = day
            end_time = day + timedelta(hours=1)
            drifted = (
                _noisy_unit(rng, centroids[i], spec.encounter_drift)
                if spec.encounter_drift > 0
                else centroids[i]
            )
            for j in range(spec.tracklets_per_encounter):
                tid = f"t{tracklet_no:05d}"
                tracklet_no += 1
                if spec.co_occurrence and not is_distractor:
                    video = f"v_g{group_index(ident)}_e{e}"
                    span = (j * 200, j * 200 + 100)
                else:
                    video = f"v_{tid}"
                    span = (0, 100)
                tracklets.append(
                    TrackletMeta(
                        tracklet_id=tid,
                        video_id=video,
                        location_id=location,
                        date=date,
                        start_time=start_time,
                        end_time=end_time,
                        start_frame=span[0],
                        end_frame=span[1],
                        identity=ident,
                        social_group=group_of[ident],
                        split=split_of[ident],
                    )
                )
                truth[tid] = ident
                step = max(1, (span[1] - span[0]) // spec.frames_per_tracklet)
                for f in range(spec.frames_per_tracklet):
                    records.append(
                        EmbeddingRecord(
                            record_id=record_no,
                            tracklet_id=tid,
                            frame_index=span[0] + f * step,
                            vector=_noisy_unit(rng, drifted, spec.noise),
                        )
                    )
                    record_no += 1

    records.sort(key=lambda r: (r.tracklet_id, r.frame_index))
    manifest = Manifest(
        schema_version=SCHEMA_VERSION,
        embedding_dim=spec.dim,
        records=records,
        tracklets=tracklets,
    )
    return manifest, truth


# ---------------------------------------------------------------------------
# tracking scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MotObject:
    """One linear-motion object; velocity_changes reroute it mid-video."""

    track_id: int
    start_frame: int
    end_frame: int
    start_xy: tuple[float, float]
    velocity: tuple[float, float]
    size: tuple[float, float]
    velocity_changes: tuple[tuple[int, float, float], ...] = ()
    embedding: Optional[tuple[float, ...]] = None


@dataclass(frozen=True)
class MotScenarioSpec:
    objects: tuple[MotObject, ...]
    video_id: str = "synth"
    seed: int = 42
    dropout: float = 0.0
    jitter: float = 0.0
    base_score: float = 0.9
    score_noise: float = 0.0
    # (track_id, first_frame, last_frame): detections suppressed entirely
    occlusions: tuple[tuple[int, int, int], ...] = ()
    # (track_id, first_frame, last_frame, score): forced low-score stretch
    low_score_windows: tuple[tuple[int, int, int, float], ...] = ()

    def validate(self) -> None:
        if not (0.0 <= self.dropout <= 1.0):
            raise InvalidSpec("dropout must lie in [0, 1]")
        if self.jitter < 0 or self.score_noise < 0:
            raise InvalidSpec("noise scales must be non-negative")
        if not (0.0 < self.base_score <= 1.0):
            raise InvalidSpec("base_score must lie in (0, 1]")
        seen = set()
        for o in self.objects:
            if o.track_id in seen:
                raise InvalidSpec(f"duplicate track_id {o.track_id}")
            seen.add(o.track_id)
            if o.start_frame > o.end_frame:
                raise InvalidSpec(f"object {o.track_id}: empty frame span")
            if o.size[0] <= 0 or o.size[1] <= 0:
                raise InvalidSpec(f"object {o.track_id}: non-positive size")


def gen_mot_scenario(
    spec: MotScenarioSpec,
) -> tuple[list[GroundTruthTrack], list[DetectionRecord]]:
    """Ground-truth tracks plus a degraded detection stream."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    occluded = {
        (tid, f)
        for tid, f0, f1 in spec.occlusions
        for f in range(f0, f1 + 1)
    }
    forced_score: dict[tuple[int, int], float] = {}
    for tid, f0, f1, s in spec.low_score_windows:
        for f in range(f0, f1 + 1):
            forced_score[(tid, f)] = s

    gt: list[GroundTruthTrack] = []
    detections: list[DetectionRecord] = []
    for obj in sorted(spec.objects, key=lambda o: o.track_id):
        track = GroundTruthTrack(spec.video_id, obj.track_id)
        x, y = obj.start_xy
        vx, vy = obj.velocity
        changes = {f: (nvx, nvy) for f, nvx, nvy in obj.velocity_changes}
        w, h = obj.size
        emb = (
            np.asarray(obj.embedding, dtype=np.float64)
            if obj.embedding is not None
            else None
        )
        if emb is not None:
            emb = emb / np.linalg.norm(emb)
        for frame in range(obj.start_frame, obj.end_frame + 1):
            if frame in changes:
                vx, vy = changes[frame]
            track.boxes[frame] = (x, y, w, h)
            dropped = (obj.track_id, frame) in occluded or (
                spec.dropout > 0 and rng.uniform() < spec.dropout
            )
            if not dropped:
                jx, jy = (
                    spec.jitter * rng.standard_normal(2)
                    if spec.jitter > 0
                    else (0.0, 0.0)
                )
                score = forced_score.get(
                    (obj.track_id, frame),
                    min(
                        1.0,
                        max(
                            0.05,
                            spec.base_score
                            - spec.score_noise * abs(rng.standard_normal()),
                        ),
                    ),
                )
                detections.append(
                    DetectionRecord(
                        spec.video_id,
                        frame,
                        (x + jx, y + jy, w, h),
                        score,
                        None if emb is None else emb.copy(),
                    )
                )
            x, y = x + vx, y + vy
        gt.append(track)
    detections.sort(key=lambda d: (d.frame_index, d.bbox[0], d.bbox[1]))
    return gt, detections


# ---------------------------------------------------------------------------
# toy patch embedder and explain scenarios
# ---------------------------------------------------------------------------


class PatchEmbedder:
    """Linear toy embedder: the embedding is the re-normalized weighted sum
    of per-patch intensity vectors, so each patch's exact contribution
    magnitude |w| * ||patch|| is known and serves as ground-truth relevance."""

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise InvalidSpec("patch weights must form a 2-D grid")
        if not np.all(np.isfinite(self.weights)):
            raise InvalidSpec("patch weights must be finite")

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape[:2] != self.weights.shape:
            raise InvalidSpec(
                f"patch grid {patches.shape[:2]} vs weights {self.weights.shape}"
            )
        summed = np.tensordot(self.weights, patches, axes=2)
        norm = float(np.linalg.norm(summed))
        return summed / norm if norm > 0 else np.zeros_like(summed)

    def relevance_for(self, patches: np.ndarray, record_id: int = -1) -> RelevanceMap:
        patches = np.asarray(patches, dtype=np.float64)
        values = np.abs(self.weights) * np.linalg.norm(patches, axis=2)
        return RelevanceMap(values, record_id)


def toy_patch_embedder(weights: np.ndarray) -> PatchEmbedder:
    return PatchEmbedder(weights)


@dataclass(frozen=True)
class ExplainScenarioSpec:
    """Probes whose embeddings come from the toy patch embedder: foreground
    patches carry the identity signal, background patches share one common
    direction orthogonal to every centroid."""

    grid: tuple[int, int] = (4, 4)
    n_foreground: int = 4  # first patches in row-major order
    fg_weight: float = 1.0
    bg_weight: float = 0.1
    n_identities: int = 8
    encounters_per_identity: int = 2
    records_per_encounter: int = 2
    noise: float = 0.05
    seed: int = 42

    @property
    def dim(self) -> int:
        return self.n_identities + 1

    def validate(self) -> None:
        rows, cols = self.grid
        if rows < 1 or cols < 1:
            raise InvalidSpec("grid must be non-empty")
        if not (1 <= self.n_foreground <= rows * cols):
            raise InvalidSpec("n_foreground out of range")
        if self.n_identities < 2 or self.encounters_per_identity < 2:
            raise InvalidSpec("need >= 2 identities with >= 2 encounters")
        if self.fg_weight <= self.bg_weight:
            raise InvalidSpec("foreground weight must exceed background weight")


@dataclass
class ExplainScenario:
    manifest: Manifest
    truth: dict[str, str]
    embedder: PatchEmbedder
    probes: list[PerturbedProbe]
    maps: list[RelevanceMap]
    patches_by_record: dict[int, np.ndarray]
    foreground_mask: np.ndarray


def gen_explain_scenario(spec: ExplainScenarioSpec) -> ExplainScenario:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rows, cols = spec.grid
    n_patches = rows * cols
    basis = _orthonormal_rows(rng, spec.n_identities + 1, spec.dim)
    centroids, background = basis[:-1], basis[-1]

    weights = np.full((rows, cols), spec.bg_weight)
    fg_mask = np.zeros((rows, cols), dtype=bool)
    fg_mask.ravel()[: spec.n_foreground] = True
    weights[fg_mask] = spec.fg_weight
    embedder = PatchEmbedder(weights)

    tracklets: list[TrackletMeta] = []
    records: list[EmbeddingRecord] = []
    truth: dict[str, str] = {}
    probes: list[PerturbedProbe] = []
    maps: list[RelevanceMap] = []
    patches_by_record: dict[int, np.ndarray] = {}
    base_day = datetime(2021, 4, 1, 9, 0, 0)
    record_no = 0

    for i in range(spec.n_identities):
        ident = f"id{i:03d}"
        for e in range(spec.encounters_per_identity):
            tid = f"t{i:03d}e{e}"
            day = base_day + timedelta(days=e)
            tracklets.append(
                TrackletMeta(
                    tracklet_id=tid,
                    video_id=f"v_{tid}",
                    location_id=f"L{e}",
                    date=day.strftime("%Y-%m-%d"),
                    start_time=day,
                    end_time=day + timedelta(minutes=30),
                    start_frame=0,
                    end_frame=spec.records_per_encounter,
                    identity=ident,
                    social_group=None,
                    split="test",
                )
            )
            truth[tid] = ident
            for f in range(spec.records_per_encounter):
                patches = np.empty((rows, cols, spec.dim))
                flat = patches.reshape(n_patches, spec.dim)
                for p in range(n_patches):
                    if fg_mask.ravel()[p]:
                        flat[p] = _noisy_unit(rng, centroids[i], spec.noise)
                    else:
                        flat[p] = background
                embedding = embedder(patches)
                record = EmbeddingRecord(
                    record_id=record_no,
                    tracklet_id=tid,
                    frame_index=f,
                    vector=embedding,
                )
                records.append(record)
                relevance = embedder.relevance_for(patches, record_id=record_no)
                maps.append(relevance)
                patches_by_record[record_no] = patches
                record_no += 1

    records.sort(key=lambda r: (r.tracklet_id, r.frame_index))
    manifest = Manifest(
        schema_version=SCHEMA_VERSION,
        embedding_dim=spec.dim,
        records=records,
        tracklets=tracklets,
    )
    by_rid = {m.record_id: m for m in maps}
    for r in manifest.records:
        t = manifest.tracklet_by_id[r.tracklet_id]
        probes.append(
            PerturbedProbe(
                patches=patches_by_record[r.record_id],
                relevance=by_rid[r.record_id],
                true_identity=t.identity,
                encounter=encounter_of(t),
            )
        )
    return ExplainScenario(
        manifest, truth, embedder, probes, maps, patches_by_record, fg_mask
    )

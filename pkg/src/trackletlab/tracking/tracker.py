"""Two-stage motion(+appearance) multi-object tracker.

High-confidence detections are matched to confirmed tracks with a blended
appearance/IoU cost; leftover confirmed tracks get a second chance against
low-confidence detections on IoU alone (this recovers objects whose detector
score dipped during occlusion). Tentative tracks are matched against the
remaining high-confidence detections so they can accumulate the consecutive
hits needed to confirm; anything still unmatched with a high score spawns a
new tentative track.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..datamodel import DetectionRecord
from .kalman import KalmanFilter, tlwh_to_xyah, xyah_to_tlwh


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) vs (m, 4) boxes in (x, y, w, h)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0][None, :], b[:, 1][None, :]
    bx2, by2 = bx1 + b[:, 2][None, :], by1 + b[:, 3][None, :]
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def hungarian_min_cost(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment; np.inf marks forbidden pairs, rows/columns
    whose every entry is forbidden stay unassigned."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        return []
    finite = np.isfinite(cost)
    if not finite.any():
        return []
    big = float(np.abs(cost[finite]).sum()) + 1.0
    safe = np.where(finite, cost, big)
    rows, cols = linear_sum_assignment(safe)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if finite[r, c]]


class TrackStatus(Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    LOST = "lost"


@dataclass
class TrackState:
    """One active track: Kalman state plus lifecycle bookkeeping."""

    track_id: int
    mean: np.ndarray
    covariance: np.ndarray
    status: TrackStatus = TrackStatus.TENTATIVE
    age: int = 1
    hits: int = 1
    consecutive_hits: int = 1
    time_since_update: int = 0
    appearance: Optional[np.ndarray] = None  # EMA of detection embeddings
    last_score: float = 0.0

    def tlwh(self) -> np.ndarray:
        return xyah_to_tlwh(self.mean[:4])


@dataclass
class TrackerConfig:
    high_thresh: float = 0.6
    low_thresh: float = 0.1
    iou_gate: float = 0.3
    lambda_app: float = 0.25
    min_hits: int = 3
    max_age: int = 30
    ema_momentum: float = 0.9
    # BoostTrack-style pre-association uplift: a detection's score is raised
    # by multiplier * (max IoU with any predicted track box), capped at 1.
    boost_multiplier: Optional[float] = None

    def validate(self) -> None:
        if not (0.0 <= self.low_thresh <= self.high_thresh <= 1.0):
            raise ValueError("need 0 <= low_thresh <= high_thresh <= 1")
        if not (0.0 <= self.lambda_app <= 1.0):
            raise ValueError("lambda_app must lie in [0, 1]")
        if not (0.0 <= self.iou_gate <= 1.0):
            raise ValueError("iou_gate must lie in [0, 1]")
        if self.min_hits < 1 or self.max_age < 0:
            raise ValueError("min_hits >= 1 and max_age >= 0 required")
        if not (0.0 <= self.ema_momentum < 1.0):
            raise ValueError("ema_momentum must lie in [0, 1)")


def _appearance_cost(track: TrackState, det: DetectionRecord) -> Optional[float]:
    if track.appearance is None or det.embedding is None:
        return None
    return 1.0 - float(track.appearance @ det.embedding)


def _blend_cost(
    tracks: Sequence[TrackState],
    dets: Sequence[DetectionRecord],
    lambda_app: float,
    iou_gate: float,
) -> np.ndarray:
    """Stage-1 cost: lambda * appearance distance + (1 - lambda) * IoU
    distance, gated on IoU; pairs without embeddings fall back to pure IoU."""
    if not tracks or not dets:
        return np.zeros((len(tracks), len(dets)))
    ious = iou_matrix(
        np.stack([t.tlwh() for t in tracks]),
        np.stack([d.bbox for d in dets]),
    )
    cost = np.full((len(tracks), len(dets)), np.inf)
    for i, t in enumerate(tracks):
        for j, d in enumerate(dets):
            if ious[i, j] < iou_gate:
                continue
            app = _appearance_cost(t, d) if lambda_app > 0 else None
            if app is None:
                cost[i, j] = 1.0 - ious[i, j]
            else:
                cost[i, j] = lambda_app * app + (1.0 - lambda_app) * (1.0 - ious[i, j])
    return cost


def _iou_cost(
    tracks: Sequence[TrackState], dets: Sequence[DetectionRecord], iou_gate: float
) -> np.ndarray:
    if not tracks or not dets:
        return np.zeros((len(tracks), len(dets)))
    ious = iou_matrix(
        np.stack([t.tlwh() for t in tracks]),
        np.stack([d.bbox for d in dets]),
    )
    cost = np.where(ious >= iou_gate, 1.0 - ious, np.inf)
    return cost


@dataclass
class Association:
    matches: list[tuple[int, int]]  # (track index, detection index)
    unmatched_tracks: list[int]
    new_track_detections: list[int]


def associate_two_stage(
    tracks: Sequence[TrackState],
    detections: Sequence[DetectionRecord],
    config: TrackerConfig,
) -> Association:
    """Cascaded association over one frame's detections (already predicted).

    Stage 1: confirmed tracks vs high-score detections, blended cost.
    Stage 2: leftover confirmed tracks vs low-score detections, IoU only.
    Initiation: tentative tracks vs leftover high-score detections, IoU only;
    high-score detections that survive everything spawn new tracks.
    """
    config.validate()
    high = [i for i, d in enumerate(detections) if d.score >= config.high_thresh]
    low = [
        i
        for i, d in enumerate(detections)
        if config.low_thresh <= d.score < config.high_thresh
    ]
    confirmed = [i for i, t in enumerate(tracks) if t.status == TrackStatus.CONFIRMED]
    tentative = [i for i, t in enumerate(tracks) if t.status == TrackStatus.TENTATIVE]

    matches: list[tuple[int, int]] = []

    cost = _blend_cost(
        [tracks[i] for i in confirmed],
        [detections[j] for j in high],
        config.lambda_app,
        config.iou_gate,
    )
    stage1 = hungarian_min_cost(cost)
    matched_t = {confirmed[r] for r, _ in stage1}
    matched_d = {high[c] for _, c in stage1}
    matches.extend((confirmed[r], high[c]) for r, c in stage1)

    remaining_confirmed = [i for i in confirmed if i not in matched_t]
    stage2 = hungarian_min_cost(
        _iou_cost([tracks[i] for i in remaining_confirmed],
                  [detections[j] for j in low], config.iou_gate)
    )
    matches.extend((remaining_confirmed[r], low[c]) for r, c in stage2)
    matched_t.update(remaining_confirmed[r] for r, _ in stage2)
    matched_d.update(low[c] for _, c in stage2)

    remaining_high = [j for j in high if j not in matched_d]
    init = hungarian_min_cost(
        _iou_cost([tracks[i] for i in tentative],
                  [detections[j] for j in remaining_high], config.iou_gate)
    )
    matches.extend((tentative[r], remaining_high[c]) for r, c in init)
    matched_t.update(tentative[r] for r, _ in init)
    matched_d.update(remaining_high[c] for _, c in init)

    unmatched_tracks = [i for i in range(len(tracks)) if i not in matched_t]
    spawn = [j for j in high if j not in matched_d]
    return Association(sorted(matches), unmatched_tracks, spawn)


class Tracker:
    """Stateful per-video tracker; feed frames in ascending order."""

    def __init__(self, config: Optional[TrackerConfig] = None):
        self.config = config or TrackerConfig()
        self.config.validate()
        self.kf = KalmanFilter()
        self.tracks: list[TrackState] = []
        self._next_id = 1

    def _spawn(self, det: DetectionRecord) -> TrackState:
        mean, cov = self.kf.initiate(tlwh_to_xyah(np.asarray(det.bbox)))
        status = (
            TrackStatus.CONFIRMED if self.config.min_hits <= 1 else TrackStatus.TENTATIVE
        )
        track = TrackState(
            track_id=self._next_id,
            mean=mean,
            covariance=cov,
            status=status,
            appearance=None if det.embedding is None else det.embedding.copy(),
            last_score=det.score,
        )
        self._next_id += 1
        return track

    def _update_track(self, track: TrackState, det: DetectionRecord) -> None:
        track.mean, track.covariance = self.kf.update(
            track.mean, track.covariance, tlwh_to_xyah(np.asarray(det.bbox))
        )
        track.hits += 1
        # time_since_update == 1 here: exactly one predict since the last hit
        track.consecutive_hits = (
            track.consecutive_hits + 1 if track.time_since_update <= 1 else 1
        )
        track.time_since_update = 0
        track.last_score = det.score
        if det.embedding is not None:
            if track.appearance is None:
                track.appearance = det.embedding.copy()
            else:
                m = self.config.ema_momentum
                blended = m * track.appearance + (1.0 - m) * det.embedding
                norm = float(np.linalg.norm(blended))
                track.appearance = blended / norm if norm > 0 else blended
        if (
            track.status == TrackStatus.TENTATIVE
            and track.consecutive_hits >= self.config.min_hits
        ):
            track.status = TrackStatus.CONFIRMED

    def _boost_scores(self, detections: list[DetectionRecord]) -> list[DetectionRecord]:
        mult = self.config.boost_multiplier
        if mult is None or not self.tracks or not detections:
            return detections
        track_boxes = np.stack([t.tlwh() for t in self.tracks])
        det_boxes = np.stack([d.bbox for d in detections])
        best = iou_matrix(det_boxes, track_boxes).max(axis=1)
        boosted = []
        for d, b in zip(detections, best):
            score = min(1.0, d.score + mult * float(b))
            boosted.append(
                DetectionRecord(d.video_id, d.frame_index, d.bbox, score, d.embedding)
            )
        return boosted

    def step(self, detections: Sequence[DetectionRecord]) -> list[TrackState]:
        """Advance one frame; returns tracks updated by a detection this
        frame and confirmed afterwards."""
        for t in self.tracks:
            t.mean, t.covariance = self.kf.predict(t.mean, t.covariance)
            t.age += 1
            t.time_since_update += 1

        dets = self._boost_scores(list(detections))
        assoc = associate_two_stage(self.tracks, dets, self.config)
        emitted: list[TrackState] = []
        for ti, di in assoc.matches:
            track = self.tracks[ti]
            self._update_track(track, dets[di])
            if track.status == TrackStatus.CONFIRMED:
                emitted.append(track)

        survivors: list[TrackState] = []
        for i, t in enumerate(self.tracks):
            if i in assoc.unmatched_tracks:
                if t.status == TrackStatus.TENTATIVE:
                    continue  # a broken streak discards the candidate
                if t.time_since_update > self.config.max_age:
                    t.status = TrackStatus.LOST
                    continue
            survivors.append(t)
        self.tracks = survivors
        for j in assoc.new_track_detections:
            track = self._spawn(dets[j])
            self.tracks.append(track)
            if track.status == TrackStatus.CONFIRMED:
                emitted.append(track)
        return sorted(emitted, key=lambda t: t.track_id)


def run_tracker(
    detections: Sequence[DetectionRecord],
    config: Optional[TrackerConfig] = None,
) -> list[tuple[int, int, float, float, float, float, float]]:
    """Track one video; returns MOT rows (frame, id, x, y, w, h, score)."""
    tracker = Tracker(config)
    by_frame: dict[int, list[DetectionRecord]] = {}
    for d in detections:
        by_frame.setdefault(d.frame_index, []).append(d)
    if not by_frame:
        return []
    rows: list[tuple[int, int, float, float, float, float, float]] = []
    for frame in range(min(by_frame), max(by_frame) + 1):
        emitted = tracker.step(by_frame.get(frame, []))
        for t in emitted:
            x, y, w, h = t.tlwh()
            rows.append((frame, t.track_id, float(x), float(y), float(w), float(h), t.last_score))
    return rows

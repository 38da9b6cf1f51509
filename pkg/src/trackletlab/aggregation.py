"""Collapse frame-level retrieval outputs into one decision per tracklet.

Three strategies are implemented: majority voting over frame predictions,
confidence-weighted voting, and querying with the tracklet's re-normalized
mean embedding. A fourth slot ("ptam", a trained transformer aggregator) is
reserved in the strategy enum but deliberately unsupported: it cannot run
without a training stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .datamodel import EmbeddingRecord, EncounterKey, Manifest, TrackletMeta, encounter_of, l2_normalize
from .errors import EmptyTracklet, NoProbes, Unsupported
from .retrieval import (
    DEFAULT_K,
    Gallery,
    RetrievalResult,
    knn_query,
    knn_query_batch,
)

STRATEGIES = ("majority", "confidence", "embedding_mean", "ptam")


@dataclass(frozen=True)
class TrackletDecision:
    tracklet_id: str
    identity: Optional[str]
    confidence: float
    strategy: str


def _best_identity(
    weights: dict[Optional[str], float],
    counts: dict[Optional[str], int],
    primary: str,
) -> Optional[str]:
    """Pick the winner by (primary key, secondary key, lexicographic identity)."""
    if primary == "count":
        key = lambda i: (-counts[i], -weights[i], i if i is not None else "")
    else:
        key = lambda i: (-weights[i], -counts[i], i if i is not None else "")
    return min(weights, key=key)


def aggregate_majority(
    frames: Sequence[RetrievalResult], tracklet_id: str = ""
) -> TrackletDecision:
    """Most frequent frame-level top-1 prediction; count ties broken by
    summed frame confidence, then lexicographically."""
    if not frames:
        raise EmptyTracklet("no frame results to aggregate")
    counts: dict[Optional[str], int] = {}
    conf_sums: dict[Optional[str], float] = {}
    for f in frames:
        counts[f.predicted_identity] = counts.get(f.predicted_identity, 0) + 1
        conf_sums[f.predicted_identity] = conf_sums.get(f.predicted_identity, 0.0) + f.confidence
    winner = _best_identity(conf_sums, counts, primary="count")
    confidence = counts[winner] / len(frames)
    return TrackletDecision(tracklet_id, winner, confidence, "majority")


def aggregate_confidence(
    frames: Sequence[RetrievalResult], tracklet_id: str = ""
) -> TrackletDecision:
    """Identity with the largest confidence-weighted vote mass. With uniform
    confidences this reduces exactly to aggregate_majority."""
    if not frames:
        raise EmptyTracklet("no frame results to aggregate")
    counts: dict[Optional[str], int] = {}
    weights: dict[Optional[str], float] = {}
    for f in frames:
        counts[f.predicted_identity] = counts.get(f.predicted_identity, 0) + 1
        weights[f.predicted_identity] = weights.get(f.predicted_identity, 0.0) + f.confidence
    winner = _best_identity(weights, counts, primary="weight")
    total = sum(weights.values())
    confidence = 0.0 if total <= 0.0 else min(max(weights[winner] / total, 0.0), 1.0)
    return TrackletDecision(tracklet_id, winner, confidence, "confidence")


def aggregate_embedding_mean(
    frames: Sequence[EmbeddingRecord],
    gallery: Gallery,
    encounter: EncounterKey,
    k: int = DEFAULT_K,
) -> TrackletDecision:
    """Re-normalized mean of the frame vectors, queried once."""
    if not frames:
        raise EmptyTracklet("no frame embeddings to aggregate")
    tracklet_ids = {f.tracklet_id for f in frames}
    if len(tracklet_ids) != 1:
        raise ValueError(f"frames span multiple tracklets: {sorted(tracklet_ids)}")
    mean = np.mean(np.stack([f.vector for f in frames]), axis=0)
    query = l2_normalize(mean)  # ZeroVector on exact cancellation
    result = knn_query(gallery, query, encounter, k=k)
    return TrackletDecision(
        tracklet_ids.pop(), result.predicted_identity, result.confidence, "embedding_mean"
    )


# ---------------------------------------------------------------------------
# tracklet-level evaluation
# ---------------------------------------------------------------------------

def select_probe_tracklets(
    manifest: Manifest, eval_split: str
) -> list[tuple[TrackletMeta, list[EmbeddingRecord]]]:
    """Eval-split tracklets whose identity spans >= 2 encounters."""
    encounters_by_identity: dict[str, set[EncounterKey]] = {}
    for t in manifest.tracklets:
        if t.split == eval_split and t.identity is not None:
            encounters_by_identity.setdefault(t.identity, set()).add(encounter_of(t))
    eligible = {i for i, encs in encounters_by_identity.items() if len(encs) >= 2}
    by_tracklet: dict[str, list[EmbeddingRecord]] = {}
    for r in manifest.records:
        by_tracklet.setdefault(r.tracklet_id, []).append(r)
    out = []
    for t in sorted(manifest.tracklets, key=lambda t: t.tracklet_id):
        if t.split == eval_split and t.identity in eligible and by_tracklet.get(t.tracklet_id):
            out.append((t, by_tracklet[t.tracklet_id]))
    return out


@dataclass
class TrackletEvalReport:
    per_identity: dict[str, tuple[int, int]]  # identity -> (n_tracklets, n_correct)
    decisions: list[TrackletDecision]

    @property
    def balanced_top1(self) -> float:
        accs = [c / n for n, c in self.per_identity.values()]
        return float(np.mean(accs))


def evaluate_tracklets(
    manifest: Manifest,
    gallery: Gallery,
    strategy: str,
    eval_split: str,
    k: int = DEFAULT_K,
    n_threads: int = 1,
) -> TrackletEvalReport:
    """One decision per probe tracklet, tallied per identity."""
    if strategy == "ptam":
        raise Unsupported(
            "ptam aggregation requires a trained transformer aggregator and is "
            "not available in this tool"
        )
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    probe_tracklets = select_probe_tracklets(manifest, eval_split)
    if not probe_tracklets:
        raise NoProbes(f"no probe tracklets in split {eval_split!r}")

    decisions: list[TrackletDecision] = []
    if strategy == "embedding_mean":
        means, encs, tids = [], [], []
        for t, frames in probe_tracklets:
            mean = np.mean(np.stack([f.vector for f in frames]), axis=0)
            means.append(l2_normalize(mean))
            encs.append(encounter_of(t))
            tids.append(t.tracklet_id)
        results = knn_query_batch(gallery, np.stack(means), encs, k=k, n_threads=n_threads)
        for tid, res in zip(tids, results):
            decisions.append(
                TrackletDecision(tid, res.predicted_identity, res.confidence, strategy)
            )
    else:
        all_vecs = []
        all_encs = []
        spans = []  # (tracklet, start, stop)
        for t, frames in probe_tracklets:
            start = len(all_vecs)
            enc = encounter_of(t)
            for f in frames:
                all_vecs.append(f.vector)
                all_encs.append(enc)
            spans.append((t, start, len(all_vecs)))
        results = knn_query_batch(
            gallery, np.stack(all_vecs), all_encs, k=k, n_threads=n_threads
        )
        agg = aggregate_majority if strategy == "majority" else aggregate_confidence
        for t, start, stop in spans:
            decisions.append(agg(results[start:stop], tracklet_id=t.tracklet_id))

    per_identity: dict[str, tuple[int, int]] = {}
    for (t, _), decision in zip(probe_tracklets, decisions):
        n, c = per_identity.get(t.identity, (0, 0))
        per_identity[t.identity] = (n + 1, c + (1 if decision.identity == t.identity else 0))
    return TrackletEvalReport(per_identity, decisions)


def evaluate_tracklet_top1(
    manifest: Manifest,
    gallery: Gallery,
    strategy: str,
    eval_split: str,
    k: int = DEFAULT_K,
    n_threads: int = 1,
) -> float:
    """Balanced Top-1 over identities with one decision per tracklet."""
    return evaluate_tracklets(
        manifest, gallery, strategy, eval_split, k=k, n_threads=n_threads
    ).balanced_top1

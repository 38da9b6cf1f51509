"""Open-set cross-encounter k-NN identification and balanced Top-1 evaluation.

The gallery is an immutable matrix of unit vectors. Every query dynamically
excludes gallery records that share the probe's encounter (same camera
location and calendar day), then ranks the rest by dot-product similarity.
Ties in similarity are broken by ascending record_id so results are
reproducible bit-for-bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .datamodel import EmbeddingRecord, EncounterKey, Manifest, encounter_of
from .errors import (
    DimensionMismatch,
    EmptyGallery,
    NoEligibleNeighbors,
    NoProbes,
)

DEFAULT_K = 5

_PROBE_CHUNK = 128


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors (callers guarantee normalization)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {a.shape} vs {b.shape}")
    return float(a @ b)


@dataclass(frozen=True)
class Neighbor:
    record_id: int
    identity: Optional[str]
    similarity: float


@dataclass(frozen=True)
class RetrievalResult:
    probe_record_id: Optional[int]
    neighbors: tuple[Neighbor, ...]
    predicted_identity: Optional[str]
    confidence: float


class Gallery:
    """Immutable searchable set of embeddings with per-record exclusion keys."""

    def __init__(
        self,
        vectors: np.ndarray,
        record_ids: Sequence[int],
        identities: Sequence[Optional[str]],
        encounters: Sequence[EncounterKey],
        splits: Sequence[str],
    ):
        vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64))
        if vectors.ndim != 2:
            raise DimensionMismatch(f"gallery matrix must be 2-D, got {vectors.shape}")
        if vectors.shape[0] == 0:
            raise EmptyGallery("gallery has no rows")
        n = vectors.shape[0]
        if not (len(record_ids) == len(identities) == len(encounters) == len(splits) == n):
            raise DimensionMismatch("gallery column lengths disagree")
        self.vectors = vectors
        self.record_ids = np.asarray(record_ids, dtype=np.int64)
        self.identities = np.asarray(identities, dtype=object)
        self.encounters = tuple(encounters)
        self.splits = tuple(splits)
        self._enc_code_of: dict[EncounterKey, int] = {}
        codes = np.empty(n, dtype=np.int64)
        for i, enc in enumerate(encounters):
            codes[i] = self._enc_code_of.setdefault(enc, len(self._enc_code_of))
        self._enc_codes = codes
        self.vectors.setflags(write=False)
        self.record_ids.setflags(write=False)
        self._enc_codes.setflags(write=False)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def encounter_code(self, key: EncounterKey) -> int:
        """Code of a known encounter, or -1 when absent from the gallery."""
        return self._enc_code_of.get(key, -1)


def build_gallery(manifest: Manifest, eval_split: str) -> Gallery:
    """Gallery = training split + single-encounter distractors + the chosen
    evaluation split. The other evaluation split is excluded."""
    if eval_split not in ("val", "test"):
        raise ValueError(f"eval_split must be 'val' or 'test', got {eval_split!r}")
    wanted = {"train", "distractor", eval_split}
    vectors, rids, idents, encs, splits = [], [], [], [], []
    for r in manifest.records:
        t = manifest.tracklet_by_id[r.tracklet_id]
        if t.split not in wanted:
            continue
        vectors.append(r.vector)
        rids.append(r.record_id)
        idents.append(t.identity)
        encs.append(encounter_of(t))
        splits.append(t.split)
    if not vectors:
        raise EmptyGallery(f"no records with split in {sorted(wanted)}")
    return Gallery(np.stack(vectors), rids, idents, encs, splits)


def vote_identity(neighbors: Sequence[Neighbor]) -> tuple[Optional[str], float]:
    """Majority vote over neighbor identities.

    Count ties are broken by the larger sum of similarities, then by
    lexicographically smallest identity. Confidence is the winners'
    similarity mass over the positive similarity mass of all neighbors,
    clamped to [0, 1].
    """
    if not neighbors:
        raise NoEligibleNeighbors("vote over empty neighbor list")
    counts: dict[Optional[str], int] = {}
    sim_sums: dict[Optional[str], float] = {}
    for nb in neighbors:
        counts[nb.identity] = counts.get(nb.identity, 0) + 1
        sim_sums[nb.identity] = sim_sums.get(nb.identity, 0.0) + nb.similarity
    winner = min(
        counts,
        key=lambda ident: (-counts[ident], -sim_sums[ident], ident if ident is not None else ""),
    )
    denom = sum(max(nb.similarity, 0.0) for nb in neighbors)
    confidence = 0.0 if denom <= 0.0 else min(max(sim_sums[winner] / denom, 0.0), 1.0)
    return winner, confidence


def _top_k_neighbors(
    gallery: Gallery, sims: np.ndarray, eligible: np.ndarray, k: int
) -> tuple[Neighbor, ...]:
    idx = np.flatnonzero(eligible)
    if idx.size == 0:
        raise NoEligibleNeighbors("all gallery records share the probe encounter")
    k_eff = min(k, idx.size)
    s = sims[idx]
    if idx.size > k_eff:
        kth = -np.partition(-s, k_eff - 1)[k_eff - 1]
        keep = s >= kth
        idx = idx[keep]
        s = s[keep]
    order = np.lexsort((gallery.record_ids[idx], -s))[:k_eff]
    chosen = idx[order]
    return tuple(
        Neighbor(
            record_id=int(gallery.record_ids[i]),
            identity=gallery.identities[i],
            similarity=float(sims[i]),
        )
        for i in chosen
    )


def knn_query(
    gallery: Gallery,
    probe: Union[EmbeddingRecord, np.ndarray],
    probe_encounter: EncounterKey,
    k: int = DEFAULT_K,
) -> RetrievalResult:
    """Nearest neighbors among gallery records outside the probe's encounter."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(probe, EmbeddingRecord):
        vec = probe.vector
        rid: Optional[int] = probe.record_id
    else:
        vec = np.asarray(probe, dtype=np.float64)
        rid = None
    if vec.shape != (gallery.dim,):
        raise DimensionMismatch(f"probe shape {vec.shape} vs gallery dim {gallery.dim}")
    sims = gallery.vectors @ vec
    eligible = gallery._enc_codes != gallery.encounter_code(probe_encounter)
    neighbors = _top_k_neighbors(gallery, sims, eligible, k)
    identity, confidence = vote_identity(neighbors)
    return RetrievalResult(rid, neighbors, identity, confidence)


def knn_query_batch(
    gallery: Gallery,
    vectors: np.ndarray,
    encounters: Sequence[EncounterKey],
    k: int = DEFAULT_K,
    record_ids: Optional[Sequence[Optional[int]]] = None,
    n_threads: int = 1,
) -> list[RetrievalResult]:
    """Query many probes. Results are identical for every thread count:
    probes are processed in fixed chunks written to disjoint output slots."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != gallery.dim:
        raise DimensionMismatch(f"probe matrix shape {vectors.shape}")
    m = vectors.shape[0]
    if len(encounters) != m:
        raise DimensionMismatch("one encounter key required per probe")
    if record_ids is None:
        record_ids = [None] * m
    enc_codes = np.array([gallery.encounter_code(e) for e in encounters], dtype=np.int64)
    results: list[Optional[RetrievalResult]] = [None] * m

    def work(start: int, stop: int) -> None:
        sims_block = vectors[start:stop] @ gallery.vectors.T
        for j in range(stop - start):
            i = start + j
            eligible = gallery._enc_codes != enc_codes[i]
            neighbors = _top_k_neighbors(gallery, sims_block[j], eligible, k)
            identity, confidence = vote_identity(neighbors)
            results[i] = RetrievalResult(record_ids[i], neighbors, identity, confidence)

    chunks = [(s, min(s + _PROBE_CHUNK, m)) for s in range(0, m, _PROBE_CHUNK)]
    if n_threads <= 1 or len(chunks) <= 1:
        for start, stop in chunks:
            work(start, stop)
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(lambda c: work(*c), chunks))
    return results  # type: ignore[return-value]


Probe = tuple[Union[EmbeddingRecord, np.ndarray], EncounterKey, str]


def select_probes(manifest: Manifest, eval_split: str) -> list[Probe]:
    """Probes are eval-split records whose identity spans >= 2 encounters.

    Distractors (single-encounter individuals) are gallery-only and never
    returned here.
    """
    encounters_by_identity: dict[str, set[EncounterKey]] = {}
    for t in manifest.tracklets:
        if t.split == eval_split and t.identity is not None:
            encounters_by_identity.setdefault(t.identity, set()).add(encounter_of(t))
    eligible = {i for i, encs in encounters_by_identity.items() if len(encs) >= 2}
    probes: list[Probe] = []
    for r in manifest.records:
        t = manifest.tracklet_by_id[r.tracklet_id]
        if t.split == eval_split and t.identity in eligible:
            probes.append((r, encounter_of(t), t.identity))
    return probes


@dataclass
class FrameEvalReport:
    per_identity: dict[str, tuple[int, int]]  # identity -> (n_probes, n_correct)
    results: list[RetrievalResult]

    @property
    def balanced_top1(self) -> float:
        accs = [c / n for n, c in self.per_identity.values()]
        return float(np.mean(accs))

    def accuracy_of(self, identity: str) -> float:
        n, c = self.per_identity[identity]
        return c / n


def evaluate_frames(
    gallery: Gallery,
    probes: Sequence[Probe],
    k: int = DEFAULT_K,
    n_threads: int = 1,
) -> FrameEvalReport:
    """Run every probe and tally per-identity Top-1 accuracy."""
    if not probes:
        raise NoProbes("no probes supplied")
    vecs = np.stack(
        [p.vector if isinstance(p, EmbeddingRecord) else np.asarray(p, dtype=np.float64)
         for p, _, _ in probes]
    )
    encs = [enc for _, enc, _ in probes]
    rids = [p.record_id if isinstance(p, EmbeddingRecord) else None for p, _, _ in probes]
    results = knn_query_batch(gallery, vecs, encs, k=k, record_ids=rids, n_threads=n_threads)
    per_identity: dict[str, tuple[int, int]] = {}
    for (_, _, truth), res in zip(probes, results):
        n, c = per_identity.get(truth, (0, 0))
        per_identity[truth] = (n + 1, c + (1 if res.predicted_identity == truth else 0))
    return FrameEvalReport(per_identity, results)


def balanced_top1(
    gallery: Gallery,
    probes: Sequence[Probe],
    k: int = DEFAULT_K,
    n_threads: int = 1,
) -> float:
    """Top-1 accuracy averaged per identity (each individual weighs equally)."""
    return evaluate_frames(gallery, probes, k=k, n_threads=n_threads).balanced_top1

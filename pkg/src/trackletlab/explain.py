"""Differentiable proxy scores for the k-NN decision, their analytic
gradients, and the patch-flipping faithfulness harness.

The retrieval vote is discrete, so attribution methods need a smooth stand-in.
Three scalars are provided, all functions of a query embedding q against a
database split into friends (same identity) and foes (everything else):

* similarity score -- q . x_p for one randomly drawn friend x_p;
* prototype margin -- q . mu_friends - q . mu_foes, where the friend
  prototype is a similarity-softmax-weighted mean and the foe prototype is
  built from the k_hard foes most similar to q;
* k-NN margin -- softmax mass (temperature tau) assigned to friends minus
  the mass assigned to foes.

Relevance maps are consumed, not produced: the harness flips patches in
Most/Least Relevant First order, re-embeds, and measures retained retrieval
accuracy.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .datamodel import EncounterKey
from .errors import (
    DimensionMismatch,
    EmptyFoeSet,
    EmptyFriendSet,
    ManifestError,
    OrderMismatch,
    ShapeMismatch,
    ZeroRelevance,
    ZeroVector,
)
from .retrieval import DEFAULT_K, Gallery, knn_query

DEFAULT_TAU = 0.1
DEFAULT_K_HARD = 5

_MAP_MAGIC = b"RLV1"


@dataclass
class ProxyContext:
    """Inputs of the proxy scores: query, friends, foes, and knobs."""

    query: np.ndarray
    friends: np.ndarray  # (m, D) unit rows, same identity as the query
    foes: np.ndarray     # (l, D) unit rows, other identities
    tau: float = DEFAULT_TAU
    k_hard: int = DEFAULT_K_HARD
    seed: int = 0

    def __post_init__(self) -> None:
        self.query = np.asarray(self.query, dtype=np.float64)
        self.friends = np.asarray(self.friends, dtype=np.float64).reshape(-1, self.query.shape[0]) \
            if np.size(self.friends) else np.zeros((0, self.query.shape[0]))
        self.foes = np.asarray(self.foes, dtype=np.float64).reshape(-1, self.query.shape[0]) \
            if np.size(self.foes) else np.zeros((0, self.query.shape[0]))
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.k_hard < 1:
            raise ValueError(f"k_hard must be >= 1, got {self.k_hard}")


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    e = np.exp(shifted)
    return e / e.sum()


def score_similarity(ctx: ProxyContext) -> float:
    """Cosine similarity of the query to one seeded-random friend."""
    if ctx.friends.shape[0] == 0:
        raise EmptyFriendSet("similarity score needs at least one friend")
    rng = np.random.default_rng(ctx.seed)
    pick = int(rng.integers(ctx.friends.shape[0]))
    return float(ctx.query @ ctx.friends[pick])


def _hard_foe_indices(ctx: ProxyContext) -> np.ndarray:
    sims = ctx.foes @ ctx.query
    if ctx.k_hard > ctx.foes.shape[0]:
        raise ValueError(
            f"k_hard={ctx.k_hard} exceeds foe count {ctx.foes.shape[0]}"
        )
    order = np.lexsort((np.arange(sims.shape[0]), -sims))
    return order[: ctx.k_hard]


def _prototype(
    vectors: np.ndarray, sims: np.ndarray, tau: float, weighting: str
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean of unit rows, re-normalized. Returns (unit mean, weights)."""
    if weighting == "softmax":
        w = _softmax(sims / tau)
    elif weighting == "uniform":
        w = np.full(vectors.shape[0], 1.0 / vectors.shape[0])
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    mean = w @ vectors
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise ZeroVector("prototype vectors cancel exactly")
    return mean / norm, w


def score_proto_margin(
    ctx: ProxyContext,
    friend_weighting: str = "softmax",
    foe_weighting: str = "uniform",
) -> float:
    """Margin between the query's similarity to the friend prototype and to
    the hard-foe prototype."""
    if ctx.friends.shape[0] == 0:
        raise EmptyFriendSet("prototype margin needs friends")
    if ctx.foes.shape[0] == 0:
        raise EmptyFoeSet("prototype margin needs foes")
    fr_sims = ctx.friends @ ctx.query
    mu_p, _ = _prototype(ctx.friends, fr_sims, ctx.tau, friend_weighting)
    hard = _hard_foe_indices(ctx)
    hard_foes = ctx.foes[hard]
    mu_n, _ = _prototype(hard_foes, hard_foes @ ctx.query, ctx.tau, foe_weighting)
    return float(ctx.query @ mu_p - ctx.query @ mu_n)


def score_knn_margin(ctx: ProxyContext) -> float:
    """Softmax probability mass on friends minus mass on foes, in [-1, 1]."""
    m, l = ctx.friends.shape[0], ctx.foes.shape[0]
    if m + l == 0:
        raise EmptyFriendSet("k-NN margin needs a non-empty database")
    database = np.concatenate([ctx.friends, ctx.foes], axis=0)
    p = _softmax((database @ ctx.query) / ctx.tau)
    return float(p[:m].sum() - p[m:].sum())


def grad_knn_margin(ctx: ProxyContext) -> np.ndarray:
    """Analytic gradient of score_knn_margin with respect to the query.

    With p = softmax(X q / tau) and signs y (+1 friends, -1 foes):
    dS/dq = (1/tau) * ((y * p) @ X - (y . p) * (p @ X)).
    """
    m, l = ctx.friends.shape[0], ctx.foes.shape[0]
    if m + l == 0:
        raise EmptyFriendSet("k-NN margin needs a non-empty database")
    database = np.concatenate([ctx.friends, ctx.foes], axis=0)
    y = np.concatenate([np.ones(m), -np.ones(l)])
    p = _softmax((database @ ctx.query) / ctx.tau)
    weighted = (y * p) @ database
    center = p @ database
    score = float(y @ p)
    return (weighted - score * center) / ctx.tau


def _normalized_mean_grad_terms(
    q: np.ndarray, vectors: np.ndarray, weights: np.ndarray, mean: np.ndarray
) -> np.ndarray:
    """Common factor of d(q . mean/||mean||)/dq through softmax weights.

    mean is the un-normalized weighted mean u; returns J_u^T v with
    v = q/||u|| - (q.u) u/||u||^3 and J_u = (1/tau) sum_i w_i p_i (p_i - u)^T,
    with the 1/tau factor applied by the caller.
    """
    norm = float(np.linalg.norm(mean))
    v = q / norm - (float(q @ mean) / norm**3) * mean
    proj = vectors @ v  # p_i . v
    return (weights * proj) @ vectors - float(weights @ proj) * mean


def grad_proto_margin(
    ctx: ProxyContext,
    friend_weighting: str = "softmax",
    foe_weighting: str = "uniform",
) -> np.ndarray:
    """Analytic gradient of score_proto_margin with respect to the query.

    The hard-foe selection is piecewise constant in q and treated as fixed;
    softmax-weighted prototypes additionally contribute the weight Jacobian.
    """
    if ctx.friends.shape[0] == 0:
        raise EmptyFriendSet("prototype margin needs friends")
    if ctx.foes.shape[0] == 0:
        raise EmptyFoeSet("prototype margin needs foes")

    def side_grad(vectors: np.ndarray, weighting: str) -> np.ndarray:
        sims = vectors @ ctx.query
        if weighting == "softmax":
            w = _softmax(sims / ctx.tau)
        else:
            w = np.full(vectors.shape[0], 1.0 / vectors.shape[0])
        u = w @ vectors
        norm = float(np.linalg.norm(u))
        if norm == 0.0:
            raise ZeroVector("prototype vectors cancel exactly")
        grad = u / norm
        if weighting == "softmax":
            grad = grad + _normalized_mean_grad_terms(ctx.query, vectors, w, u) / ctx.tau
        return grad

    friend_grad = side_grad(ctx.friends, friend_weighting)
    foe_grad = side_grad(ctx.foes[_hard_foe_indices(ctx)], foe_weighting)
    return friend_grad - foe_grad


# ---------------------------------------------------------------------------
# relevance maps and the patch-flipping harness
# ---------------------------------------------------------------------------

@dataclass
class RelevanceMap:
    """Per-patch relevance values for one probe."""

    values: np.ndarray  # (rows, cols)
    record_id: int = -1

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"relevance grid must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("relevance values must be finite")


@dataclass(frozen=True)
class PerturbationCurve:
    fractions: tuple[float, ...]
    accuracy: tuple[float, ...]
    order: str  # "morf" | "lerf"


@dataclass
class PerturbedProbe:
    """One probe for the faithfulness harness: its patch grid, the relevance
    map under test, and the retrieval ground truth."""

    patches: np.ndarray  # (rows, cols, patch_dim)
    relevance: RelevanceMap
    true_identity: str
    encounter: EncounterKey

    def __post_init__(self) -> None:
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 3:
            raise ShapeMismatch(f"patch grid must be 3-D, got {self.patches.shape}")


Embedder = Callable[[np.ndarray], np.ndarray]


def flip_order(relevance: RelevanceMap, order: str) -> np.ndarray:
    """Flat patch indices in flipping order; ties resolved by ascending index."""
    flat = relevance.values.ravel()
    idx = np.arange(flat.shape[0])
    if order == "morf":
        return np.lexsort((idx, -flat))
    if order == "lerf":
        return np.lexsort((idx, flat))
    raise ValueError(f"order must be 'morf' or 'lerf', got {order!r}")


def _query_is_correct(
    gallery: Gallery,
    embedding: np.ndarray,
    encounter: EncounterKey,
    truth: str,
    k: int,
) -> bool:
    norm = float(np.linalg.norm(embedding))
    if norm == 0.0:
        return False  # an all-baseline input carries no usable query
    if abs(norm - 1.0) > 1e-6:
        embedding = embedding / norm
    result = knn_query(gallery, embedding, encounter, k=k)
    return result.predicted_identity == truth


def perturbation_curve(
    probes: Sequence[PerturbedProbe],
    embed: Embedder,
    gallery: Gallery,
    order: str,
    fractions: Sequence[float],
    k: int = DEFAULT_K,
) -> PerturbationCurve:
    """Replace the first ceil(f * n_patches) patches in the chosen order by
    the zero baseline, re-embed, and measure retained Top-1 accuracy."""
    if not probes:
        raise ValueError("no probes supplied")
    fractions = [float(f) for f in fractions]
    if fractions[0] != 0.0:
        raise ValueError("fractions must start at 0")
    if any(b < a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be ascending")
    if any(f < 0 or f > 1 for f in fractions):
        raise ValueError("fractions must lie in [0, 1]")

    orders = []
    for p in probes:
        if p.relevance.values.shape != p.patches.shape[:2]:
            raise OrderMismatch(
                f"relevance grid {p.relevance.values.shape} vs patch grid "
                f"{p.patches.shape[:2]}"
            )
        orders.append(flip_order(p.relevance, order))

    accuracy = []
    for f in fractions:
        hits = 0
        for p, rank in zip(probes, orders):
            n_patches = rank.shape[0]
            n_flip = math.ceil(f * n_patches)
            patched = p.patches.reshape(n_patches, -1).copy()
            patched[rank[:n_flip]] = 0.0
            embedding = embed(patched.reshape(p.patches.shape))
            hits += _query_is_correct(gallery, embedding, p.encounter, p.true_identity, k)
        accuracy.append(hits / len(probes))
    return PerturbationCurve(tuple(fractions), tuple(accuracy), order)


def curve_auc(curve: PerturbationCurve) -> float:
    """Trapezoidal area under accuracy vs fraction."""
    return float(np.trapz(curve.accuracy, curve.fractions))


def relevance_mass_in_mask(relevance: RelevanceMap, mask: np.ndarray) -> float:
    """Share of total absolute relevance falling inside the boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != relevance.values.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs relevance {relevance.values.shape}")
    magnitude = np.abs(relevance.values)
    total = float(magnitude.sum())
    if total == 0.0:
        raise ZeroRelevance("total absolute relevance is zero")
    return float(magnitude[mask].sum() / total)


# ---------------------------------------------------------------------------
# relevance map file format
# ---------------------------------------------------------------------------

def write_relevance_maps(path: Path | str, maps: Sequence[RelevanceMap]) -> None:
    """RLV1 container: magic, u32 rows, u32 cols, u64 count, then per probe
    an i64 record_id followed by rows*cols float32 values."""
    if not maps:
        raise ValueError("no maps to write")
    rows, cols = maps[0].values.shape
    for m in maps:
        if m.values.shape != (rows, cols):
            raise ShapeMismatch("all maps in one file must share a grid shape")
    with open(path, "wb") as fh:
        fh.write(_MAP_MAGIC)
        fh.write(struct.pack("<IIQ", rows, cols, len(maps)))
        for m in maps:
            fh.write(struct.pack("<q", m.record_id))
            fh.write(np.ascontiguousarray(m.values, dtype="<f4").tobytes())


def read_relevance_maps(path: Path | str) -> list[RelevanceMap]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAP_MAGIC:
            raise ManifestError(f"{path}: bad magic {magic!r}, expected {_MAP_MAGIC!r}")
        rows, cols, count = struct.unpack("<IIQ", fh.read(16))
        maps = []
        grid_bytes = rows * cols * 4
        for _ in range(count):
            (record_id,) = struct.unpack("<q", fh.read(8))
            body = fh.read(grid_bytes)
            if len(body) != grid_bytes:
                raise ManifestError(f"{path}: truncated relevance grid")
            values = np.frombuffer(body, dtype="<f4").reshape(rows, cols)
            maps.append(RelevanceMap(values.astype(np.float64), record_id))
    return maps

"""Population counting via unconstrained and cannot-link-constrained
clustering of tracklet embeddings, scored with ARI/AMI.

Cannot-link pairs come from spatiotemporal metadata and expert group labels:
two tracklets cannot be the same individual if they overlap in one video's
frames, if they were recorded simultaneously at different camera sites, or
if they carry different social-group annotations.

All algorithms run on cosine distance (1 - dot) over unit vectors and visit
points in ascending tracklet_id order, so results are reproducible.

Constrained HAC stopping semantics: with a target K the agglomeration stops
at K clusters (InfeasibleK when constraints block the path). With a distance
threshold and no constraints it stops once the closest pair exceeds the
threshold. With constraints the default is to keep merging the closest legal
pair until every remaining cluster pair is forbidden ("exhaustion"): the
constraint set, not the threshold, decides the population estimate, which is
what de-fragments drifted identities. Pass ``constrained_stop="threshold"``
to keep the plain conjunction of both rules instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .datamodel import Manifest, TrackletMeta, l2_normalize
from .errors import DomainMismatch, EmptyTracklet, InfeasibleK
from .retrieval import Gallery  # noqa: F401  (re-exported pipeline surface)

DEFAULT_HAC_THRESHOLD = 0.4
DEFAULT_SKEW_TOLERANCE = timedelta(minutes=5)

CONSTRAINT_ORIGINS = ("frame", "location", "social_group")


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------

class CannotLinkSet:
    """Unordered tracklet-id pairs that must never share a cluster, each
    tagged with the metadata rule(s) that produced it."""

    def __init__(self) -> None:
        self._origins: dict[tuple[str, str], set[str]] = {}

    @staticmethod
    def _key(a: str, b: str) -> tuple[str, str]:
        if a == b:
            raise ValueError(f"cannot-link pair of a tracklet with itself: {a!r}")
        return (a, b) if a < b else (b, a)

    def add(self, a: str, b: str, origin: str) -> None:
        if origin not in CONSTRAINT_ORIGINS:
            raise ValueError(f"unknown constraint origin {origin!r}")
        self._origins.setdefault(self._key(a, b), set()).add(origin)

    def forbids(self, a: str, b: str) -> bool:
        if a == b:
            return False
        return self._key(a, b) in self._origins

    def origins_of(self, a: str, b: str) -> frozenset[str]:
        return frozenset(self._origins.get(self._key(a, b), ()))

    def pairs(self) -> list[tuple[str, str]]:
        return sorted(self._origins)

    def __len__(self) -> int:
        return len(self._origins)

    def __iter__(self) -> Iterator[tuple[str, str, frozenset[str]]]:
        for (a, b) in sorted(self._origins):
            yield a, b, frozenset(self._origins[(a, b)])

    def __contains__(self, pair: tuple[str, str]) -> bool:
        return self.forbids(*pair)


def _frames_overlap(a: TrackletMeta, b: TrackletMeta) -> bool:
    return max(a.start_frame, b.start_frame) <= min(a.end_frame, b.end_frame)


def _times_overlap(a: TrackletMeta, b: TrackletMeta, tol: timedelta) -> bool:
    a_start, a_end = a.start_time + tol, a.end_time - tol
    b_start, b_end = b.start_time + tol, b.end_time - tol
    if a_start > a_end or b_start > b_end:
        return False
    return max(a_start, b_start) <= min(a_end, b_end)


def derive_cannot_links(
    tracklets: Sequence[TrackletMeta],
    skew_tolerance: timedelta = DEFAULT_SKEW_TOLERANCE,
) -> CannotLinkSet:
    """Derive the three constraint families from tracklet metadata.

    1. frame: same video, overlapping frame spans (two boxes in one frame
       must be two individuals);
    2. location: different camera sites with wall-clock intervals still
       overlapping after shrinking each side by the clock-skew tolerance;
    3. social_group: both tracklets annotated, with differing group labels.
    """
    links = CannotLinkSet()
    ts = sorted(tracklets, key=lambda t: t.tracklet_id)
    for i, a in enumerate(ts):
        for b in ts[i + 1 :]:
            if a.video_id == b.video_id and _frames_overlap(a, b):
                links.add(a.tracklet_id, b.tracklet_id, "frame")
            if a.location_id != b.location_id and _times_overlap(a, b, skew_tolerance):
                links.add(a.tracklet_id, b.tracklet_id, "location")
            if (
                a.social_group is not None
                and b.social_group is not None
                and a.social_group != b.social_group
            ):
                links.add(a.tracklet_id, b.tracklet_id, "social_group")
    return links


# ---------------------------------------------------------------------------
# cluster labels / dendrogram
# ---------------------------------------------------------------------------

@dataclass
class ClusterLabels:
    """tracklet_id -> cluster id; noise is -1. Non-noise ids are contiguous
    from 0 in order of first appearance over ascending tracklet ids."""

    labels: dict[str, int]

    def __post_init__(self) -> None:
        remap: dict[int, int] = {}
        canonical: dict[str, int] = {}
        for tid in sorted(self.labels):
            raw = self.labels[tid]
            if raw < 0:
                canonical[tid] = -1
            else:
                canonical[tid] = remap.setdefault(raw, len(remap))
        self.labels = canonical

    def n_clusters(self) -> int:
        return len({v for v in self.labels.values() if v >= 0})

    def noise(self) -> list[str]:
        return sorted(t for t, v in self.labels.items() if v < 0)

    def members(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for tid in sorted(self.labels):
            out.setdefault(self.labels[tid], []).append(tid)
        return out


@dataclass(frozen=True)
class Dendrogram:
    """Scipy-style merge list: leaves are 0..n-1 (ascending tracklet_id),
    merge i creates node n + i."""

    merges: tuple[tuple[int, int, float, int], ...]


def count_violations(labels: ClusterLabels, constraints: CannotLinkSet) -> int:
    """Cannot-link pairs sharing a non-noise cluster label (must be zero)."""
    bad = 0
    for a, b, _ in constraints:
        la = labels.labels.get(a, -1)
        lb = labels.labels.get(b, -1)
        if la >= 0 and la == lb:
            bad += 1
    return bad


def estimate_population(labels: ClusterLabels) -> int:
    """Number of non-noise clusters."""
    return labels.n_clusters()


# ---------------------------------------------------------------------------
# embeddings and distances
# ---------------------------------------------------------------------------

def tracklet_embeddings(manifest: Manifest) -> dict[str, np.ndarray]:
    """Re-normalized mean embedding per tracklet."""
    grouped: dict[str, list[np.ndarray]] = {}
    for r in manifest.records:
        grouped.setdefault(r.tracklet_id, []).append(r.vector)
    out: dict[str, np.ndarray] = {}
    for t in manifest.tracklets:
        vecs = grouped.get(t.tracklet_id)
        if not vecs:
            raise EmptyTracklet(f"tracklet {t.tracklet_id!r} has no records")
        out[t.tracklet_id] = l2_normalize(np.mean(np.stack(vecs), axis=0))
    return out


def _as_matrix(points: Mapping[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    ids = sorted(points)
    if not ids:
        raise ValueError("no points to cluster")
    x = np.stack([np.asarray(points[t], dtype=np.float64) for t in ids])
    return ids, x


def cosine_distance_matrix(x: np.ndarray) -> np.ndarray:
    d = 1.0 - x @ x.T
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _forbidden_matrix(
    ids: Sequence[str], constraints: Optional[CannotLinkSet]
) -> Optional[np.ndarray]:
    if constraints is None or len(constraints) == 0:
        return None
    index = {t: i for i, t in enumerate(ids)}
    f = np.zeros((len(ids), len(ids)), dtype=bool)
    for a, b, _ in constraints:
        ia, ib = index.get(a), index.get(b)
        if ia is not None and ib is not None:
            f[ia, ib] = f[ib, ia] = True
    return f


# ---------------------------------------------------------------------------
# hierarchical agglomerative clustering
# ---------------------------------------------------------------------------

LINKAGES = ("average", "complete", "ward")


def _lance_williams(
    linkage: str,
    d_ac: np.ndarray,
    d_bc: np.ndarray,
    d_ab: float,
    na: float,
    nb: float,
    nc: np.ndarray,
) -> np.ndarray:
    if linkage == "average":
        return (na * d_ac + nb * d_bc) / (na + nb)
    if linkage == "complete":
        return np.maximum(d_ac, d_bc)
    # Ward's recurrence applied directly to cosine distances. Ward assumes
    # squared euclidean geometry, so this variant is impure; it is provided
    # because the linkage is conventional, with "average" as the default.
    total = na + nb + nc
    return ((na + nc) * d_ac + (nb + nc) * d_bc - nc * d_ab) / total


def hac(
    points: Mapping[str, np.ndarray],
    linkage: str = "average",
    threshold: Optional[float] = None,
    k: Optional[int] = None,
    constraints: Optional[CannotLinkSet] = None,
    constrained_stop: str = "exhaustion",
) -> tuple[ClusterLabels, Dendrogram]:
    """Greedy agglomeration on cosine distance.

    A merge is forbidden when any cross-cluster tracklet pair is
    cannot-linked; the closest legal pair always merges next. Exactly one of
    ``threshold`` / ``k`` selects the stopping rule (see module docstring
    for how constraints interact with a threshold stop).
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}, got {linkage!r}")
    if (threshold is None) == (k is None):
        raise ValueError("exactly one of threshold / k must be given")
    if threshold is not None and threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    if constrained_stop not in ("exhaustion", "threshold"):
        raise ValueError(f"bad constrained_stop {constrained_stop!r}")
    ids, x = _as_matrix(points)
    n = len(ids)
    if k is not None and not (1 <= k <= n):
        raise ValueError(f"k must be in [1, {n}], got {k}")

    work = cosine_distance_matrix(x)
    np.fill_diagonal(work, np.inf)
    forbidden = _forbidden_matrix(ids, constraints)
    if forbidden is not None:
        work[forbidden] = np.inf

    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    node_ids = list(range(n))
    members: list[list[int]] = [[i] for i in range(n)]
    merges: list[tuple[int, int, float, int]] = []
    n_clusters = n
    ignore_threshold = (
        threshold is not None
        and forbidden is not None
        and constrained_stop == "exhaustion"
    )

    while n_clusters > 1:
        if k is not None and n_clusters <= k:
            break
        flat = int(np.argmin(work))
        i, j = divmod(flat, n)
        dist = float(work[i, j])
        if not math.isfinite(dist):
            if k is not None and n_clusters > k:
                raise InfeasibleK(
                    f"constraints forbid merging below {n_clusters} clusters "
                    f"(target k={k})"
                )
            break
        if threshold is not None and dist > threshold and not ignore_threshold:
            break
        if i > j:
            i, j = j, i
        # merge j into i
        row = _lance_williams(
            linkage, work[i], work[j], dist, float(sizes[i]), float(sizes[j]), sizes
        )
        work[i, :] = row
        work[:, i] = row
        work[i, i] = np.inf
        work[j, :] = np.inf
        work[:, j] = np.inf
        sizes[i] += sizes[j]
        active[j] = False
        members[i].extend(members[j])
        members[j] = []
        merges.append((node_ids[i], node_ids[j], max(dist, 0.0), int(sizes[i])))
        node_ids[i] = n + len(merges) - 1
        n_clusters -= 1

    labels_raw: dict[str, int] = {}
    next_label = 0
    for slot in range(n):
        if active[slot]:
            for m in members[slot]:
                labels_raw[ids[m]] = next_label
            next_label += 1
    return ClusterLabels(labels_raw), Dendrogram(tuple(merges))


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------

def dbscan(
    points: Mapping[str, np.ndarray],
    eps: float,
    min_pts: int,
    constraints: Optional[CannotLinkSet] = None,
) -> ClusterLabels:
    """Density expansion on cosine distance with deferred absorption.

    With constraints, a point is never absorbed into a cluster that already
    contains one of its cannot-link partners; it stays unclaimed and may
    later seed or join a different cluster, or end as noise. Points are
    visited in ascending tracklet_id order, making the result deterministic.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts}")
    ids, x = _as_matrix(points)
    n = len(ids)
    dist = cosine_distance_matrix(x)
    neighbor_lists = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    is_core = np.array([len(nb) >= min_pts for nb in neighbor_lists])
    forbidden = _forbidden_matrix(ids, constraints)

    UNCLASSIFIED, NOISE = -2, -1
    labels = np.full(n, UNCLASSIFIED, dtype=np.int64)
    cluster = 0
    for start in range(n):
        if labels[start] != UNCLASSIFIED:
            continue
        if not is_core[start]:
            labels[start] = NOISE
            continue
        member_mask = np.zeros(n, dtype=bool)
        labels[start] = cluster
        member_mask[start] = True
        queue: list[int] = [int(v) for v in neighbor_lists[start] if v != start]
        queued = set(queue)
        head = 0
        while head < len(queue):
            cand = queue[head]
            head += 1
            if labels[cand] not in (UNCLASSIFIED, NOISE):
                continue
            if forbidden is not None and bool(np.any(forbidden[cand] & member_mask)):
                continue  # deferred: may seed or join another cluster later
            labels[cand] = cluster
            member_mask[cand] = True
            if is_core[cand]:
                for nxt in neighbor_lists[cand]:
                    nxt = int(nxt)
                    if labels[nxt] in (UNCLASSIFIED, NOISE) and nxt not in queued:
                        queue.append(nxt)
                        queued.add(nxt)
        cluster += 1
    return ClusterLabels({ids[i]: int(labels[i]) for i in range(n)})


# ---------------------------------------------------------------------------
# HDBSCAN
# ---------------------------------------------------------------------------

@dataclass
class _CondensedRow:
    parent: int
    child: int  # < n: point, >= n: cluster
    lam: float
    size: int


def _prim_mst(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """Deterministic Prim MST on a dense symmetric matrix."""
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = weights[0].copy()
    source = np.zeros(n, dtype=np.int64)
    in_tree[0] = True
    best[0] = np.inf
    edges = []
    for _ in range(n - 1):
        nxt = int(np.argmin(best))
        edges.append((int(source[nxt]), nxt, float(best[nxt])))
        in_tree[nxt] = True
        improved = weights[nxt] < best
        improved &= ~in_tree
        source[improved] = nxt
        best = np.where(improved, weights[nxt], best)
        best[nxt] = np.inf
    return edges


def _single_linkage(edges: list[tuple[int, int, float]], n: int) -> list[tuple[int, int, float, int]]:
    """Union-find over MST edges sorted by weight; scipy-style merge rows."""
    edges = sorted(edges, key=lambda e: (e[2], min(e[0], e[1]), max(e[0], e[1])))
    parent = list(range(2 * n - 1))
    node_of = list(range(n)) + [-1] * (n - 1)  # root component -> dendrogram node
    sizes = [1] * (2 * n - 1)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    rows = []
    nxt = n
    for u, v, w in edges:
        ru, rv = find(u), find(v)
        nu, nv = node_of[ru], node_of[rv]
        rows.append((nu, nv, w, sizes[ru] + sizes[rv]))
        parent[ru] = nxt
        parent[rv] = nxt
        node_of[nxt] = nxt
        sizes[nxt] = sizes[ru] + sizes[rv]
        nxt += 1
    return rows


def _condense_tree(
    sl_rows: list[tuple[int, int, float, int]], n: int, min_cluster_size: int
) -> list[_CondensedRow]:
    """Collapse the single-linkage tree: splits into a side smaller than
    min_cluster_size shed those points instead of spawning a cluster."""
    children: dict[int, tuple[int, int, float]] = {}
    for idx, (a, b, w, _) in enumerate(sl_rows):
        children[n + idx] = (a, b, w)

    def leaves(node: int) -> list[int]:
        out: list[int] = []
        stack = [node]
        while stack:
            cur = stack.pop()
            if cur < n:
                out.append(cur)
            else:
                a, b, _ = children[cur]
                stack.extend((a, b))
        return out

    rows: list[_CondensedRow] = []
    root_sl = n + len(sl_rows) - 1
    next_cluster = n + 1
    # stack of (sl_node, condensed cluster currently collecting it)
    stack = [(root_sl, n)]
    while stack:
        sl_node, cluster = stack.pop()
        if sl_node < n:
            continue  # a bare point continuing a cluster never re-splits
        a, b, w = children[sl_node]
        lam = 1.0 / max(w, 1e-12)
        size_a = 1 if a < n else sl_rows[a - n][3]
        size_b = 1 if b < n else sl_rows[b - n][3]
        big_a = size_a >= min_cluster_size
        big_b = size_b >= min_cluster_size
        if big_a and big_b:
            for child, size in ((a, size_a), (b, size_b)):
                rows.append(_CondensedRow(cluster, next_cluster, lam, size))
                stack.append((child, next_cluster))
                next_cluster += 1
        elif big_a or big_b:
            keep, shed = (a, b) if big_a else (b, a)
            for point in sorted(leaves(shed)):
                rows.append(_CondensedRow(cluster, point, lam, 1))
            stack.append((keep, cluster))
        else:
            for point in sorted(leaves(a) + leaves(b)):
                rows.append(_CondensedRow(cluster, point, lam, 1))
    return rows


def hdbscan(
    points: Mapping[str, np.ndarray],
    min_cluster_size: int,
    min_samples: Optional[int] = None,
    constraints: Optional[CannotLinkSet] = None,
    allow_single_cluster: bool = False,
) -> ClusterLabels:
    """Density hierarchy over mutual-reachability distances with
    excess-of-mass cluster extraction.

    Core distance of a point is the distance to its min_samples-th nearest
    neighbor, counting the point itself (so min_samples=1 gives 0). With
    constraints, a candidate cluster containing any cannot-link pair is
    rejected during extraction and its children compete instead.
    """
    if min_cluster_size < 2:
        raise ValueError(f"min_cluster_size must be >= 2, got {min_cluster_size}")
    if min_samples is None:
        min_samples = min_cluster_size
    if min_samples < 1:
        raise ValueError(f"min_samples must be >= 1, got {min_samples}")
    ids, x = _as_matrix(points)
    n = len(ids)
    if n < min_cluster_size or n < min_samples or n < 2:
        return ClusterLabels({t: -1 for t in ids})

    dist = cosine_distance_matrix(x)
    core = np.sort(dist, axis=1)[:, min_samples - 1]
    reach = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(reach, 0.0)

    sl_rows = _single_linkage(_prim_mst(reach), n)
    condensed = _condense_tree(sl_rows, n, min_cluster_size)

    cluster_ids = sorted({row.parent for row in condensed})
    root = n
    birth: dict[int, float] = {root: 0.0}
    child_clusters: dict[int, list[int]] = {c: [] for c in cluster_ids}
    cluster_points: dict[int, set[int]] = {c: set() for c in cluster_ids}
    exit_parent: dict[int, int] = {}
    cluster_parent: dict[int, int] = {}
    for row in condensed:
        if row.child >= n:
            birth[row.child] = row.lam
            child_clusters[row.parent].append(row.child)
            cluster_parent[row.child] = row.parent
            if row.child not in child_clusters:
                child_clusters[row.child] = []
            if row.child not in cluster_points:
                cluster_points[row.child] = set()
        else:
            exit_parent[row.child] = row.parent
    stability: dict[int, float] = {c: 0.0 for c in cluster_ids}
    for c in cluster_ids:
        stability.setdefault(c, 0.0)
    for row in condensed:
        stability[row.parent] += row.size * (row.lam - birth[row.parent])

    # point sets per cluster, accumulated bottom-up
    for point, parent in exit_parent.items():
        cluster_points[parent].add(point)
    for c in sorted(cluster_points, reverse=True):
        if c in cluster_parent:
            cluster_points[cluster_parent[c]] |= cluster_points[c]

    link_index: list[tuple[int, int]] = []
    if constraints is not None and len(constraints) > 0:
        pos = {t: i for i, t in enumerate(ids)}
        for a, b, _ in constraints:
            if a in pos and b in pos:
                link_index.append((pos[a], pos[b]))

    def violated(cluster: int) -> bool:
        pts = cluster_points[cluster]
        return any(a in pts and b in pts for a, b in link_index)

    all_clusters = sorted(set(cluster_ids) | set(cluster_parent))
    selectable = [c for c in all_clusters if allow_single_cluster or c != root]
    is_selected: dict[int, bool] = {c: False for c in all_clusters}
    eff_stability = dict(stability)
    for c in all_clusters:
        eff_stability.setdefault(c, 0.0)

    def descendants(cluster: int) -> Iterable[int]:
        stack = list(child_clusters.get(cluster, ()))
        while stack:
            cur = stack.pop()
            yield cur
            stack.extend(child_clusters.get(cur, ()))

    for c in sorted(all_clusters, reverse=True):
        subtree = sum(eff_stability[ch] for ch in child_clusters.get(c, ()))
        rejected = (c not in selectable) or violated(c)
        if rejected or eff_stability[c] < subtree:
            is_selected[c] = False
            eff_stability[c] = max(eff_stability[c], subtree) if not rejected else subtree
        else:
            is_selected[c] = True
            for d in descendants(c):
                is_selected[d] = False

    labels_raw: dict[str, int] = {}
    selected_order = {c: i for i, c in enumerate(sorted(k for k, v in is_selected.items() if v))}
    for i, tid in enumerate(ids):
        c = exit_parent.get(i)
        label = -1
        while c is not None:
            if is_selected.get(c, False):
                label = selected_order[c]
                break
            c = cluster_parent.get(c)
        labels_raw[tid] = label
    return ClusterLabels(labels_raw)


# ---------------------------------------------------------------------------
# partition agreement metrics
# ---------------------------------------------------------------------------

def _contingency(
    labels: Mapping[str, int], truth: Mapping[str, int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    if set(labels) != set(truth):
        raise DomainMismatch("partitions cover different item sets")
    if not labels:
        raise DomainMismatch("empty partitions")
    keys = sorted(labels)
    la = [labels[k] for k in keys]
    lb = [truth[k] for k in keys]
    ua = {v: i for i, v in enumerate(sorted(set(la)))}
    ub = {v: i for i, v in enumerate(sorted(set(lb)))}
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    for va, vb in zip(la, lb):
        table[ua[va], ub[vb]] += 1
    return table, table.sum(axis=1), table.sum(axis=0), len(keys)


def _same_partition(labels: Mapping[str, int], truth: Mapping[str, int]) -> bool:
    groups_a: dict[int, set[str]] = {}
    groups_b: dict[int, set[str]] = {}
    for k, v in labels.items():
        groups_a.setdefault(v, set()).add(k)
    for k, v in truth.items():
        groups_b.setdefault(v, set()).add(k)
    return {frozenset(g) for g in groups_a.values()} == {
        frozenset(g) for g in groups_b.values()
    }


def ari(labels: Mapping[str, int], truth: Mapping[str, int]) -> float:
    """Adjusted Rand Index via the pair-counting contingency formula."""
    table, a, b, n = _contingency(labels, truth)
    if _same_partition(labels, truth):
        return 1.0
    comb = lambda arr: sum(math.comb(int(v), 2) for v in arr)
    sum_table = sum(math.comb(int(v), 2) for v in table.ravel())
    sum_a, sum_b = comb(a), comb(b)
    total = math.comb(n, 2)
    expected = sum_a * sum_b / total
    mean = (sum_a + sum_b) / 2.0
    if mean == expected:
        return 1.0
    return float((sum_table - expected) / (mean - expected))


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _mutual_information(table: np.ndarray, a: np.ndarray, b: np.ndarray, n: int) -> float:
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij == 0:
                continue
            mi += (nij / n) * math.log(n * nij / (a[i] * b[j]))
    return mi


def expected_mutual_information(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """Exact hypergeometric expectation of MI between random partitions with
    the given marginals, via log-gamma arithmetic."""
    lg = math.lgamma
    emi = 0.0
    for ai in a:
        ai = int(ai)
        for bj in b:
            bj = int(bj)
            start = max(1, ai + bj - n)
            end = min(ai, bj)
            for nij in range(start, end + 1):
                term = (nij / n) * math.log(n * nij / (ai * bj))
                log_p = (
                    lg(ai + 1)
                    + lg(bj + 1)
                    + lg(n - ai + 1)
                    + lg(n - bj + 1)
                    - lg(n + 1)
                    - lg(nij + 1)
                    - lg(ai - nij + 1)
                    - lg(bj - nij + 1)
                    - lg(n - ai - bj + nij + 1)
                )
                emi += term * math.exp(log_p)
    return emi


def ami(labels: Mapping[str, int], truth: Mapping[str, int]) -> float:
    """Adjusted Mutual Information with exact E[MI] and arithmetic-mean
    normalization."""
    table, a, b, n = _contingency(labels, truth)
    if _same_partition(labels, truth):
        return 1.0
    mi = _mutual_information(table, a, b, n)
    emi = expected_mutual_information(a, b, n)
    h_mean = (_entropy(a, n) + _entropy(b, n)) / 2.0
    denominator = h_mean - emi
    if denominator == 0.0:
        return 0.0
    if denominator < 0:
        denominator = min(denominator, -np.finfo(np.float64).eps)
    else:
        denominator = max(denominator, np.finfo(np.float64).eps)
    return float((mi - emi) / denominator)

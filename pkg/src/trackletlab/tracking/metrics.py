"""HOTA / IDF1 / CLEAR-MOT evaluation over MOT-format track sets.

All three metrics share the per-frame IoU similarity between ground-truth
and predicted boxes. CLEAR matching carries the previous frame's pairs
forward while they stay above the gate, which is what makes identity
switches well defined. IDF1 matches whole trajectories globally. HOTA is
computed per localization threshold alpha in {0.05, ..., 0.95} with the
association-aware two-pass matching: per-frame Hungarian runs on IoU scaled
by the global alignment score of each (gt, pred) id pair, so ties prefer
association-consistent matches.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..datamodel import GroundTruthTrack
from .tracker import iou_matrix

HOTA_ALPHAS = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2))


def _frames_view(
    tracks: Sequence[GroundTruthTrack],
) -> dict[int, tuple[list[int], np.ndarray]]:
    """frame -> (track ids, (n, 4) boxes), ids ascending."""
    per_frame: dict[int, list[tuple[int, tuple[float, float, float, float]]]] = {}
    for t in tracks:
        for frame, box in t.boxes.items():
            per_frame.setdefault(frame, []).append((t.gt_track_id, box))
    out: dict[int, tuple[list[int], np.ndarray]] = {}
    for frame, entries in per_frame.items():
        entries.sort(key=lambda e: e[0])
        ids = [e[0] for e in entries]
        boxes = np.array([e[1] for e in entries], dtype=np.float64)
        out[frame] = (ids, boxes)
    return out


@dataclass
class ClearResult:
    idsw: int
    tp: int
    fp: int
    fn: int
    n_gt: int
    per_frame_matches: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def mota(self) -> float:
        if self.n_gt == 0:
            return 1.0 if self.fp == 0 else 0.0
        return 1.0 - (self.fn + self.fp + self.idsw) / self.n_gt


def eval_clear(
    gt: Sequence[GroundTruthTrack],
    pred: Sequence[GroundTruthTrack],
    iou_match: float = 0.5,
) -> ClearResult:
    """Per-frame matching with carry-over; IDSW counts every change of the
    predicted id matched to a ground-truth track between its matched frames."""
    gt_frames = _frames_view(gt)
    pred_frames = _frames_view(pred)
    frames = sorted(set(gt_frames) | set(pred_frames))
    last_pred_for_gt: dict[int, int] = {}  # most recent matched pred id
    carry: dict[int, int] = {}  # active gt id -> pred id from previous frame
    idsw = tp = fp = fn = n_gt = 0
    per_frame: dict[int, list[tuple[int, int]]] = {}

    for frame in frames:
        gt_ids, gt_boxes = gt_frames.get(frame, ([], np.zeros((0, 4))))
        pr_ids, pr_boxes = pred_frames.get(frame, ([], np.zeros((0, 4))))
        n_gt += len(gt_ids)
        ious = iou_matrix(gt_boxes, pr_boxes)
        matched_g: set[int] = set()
        matched_p: set[int] = set()
        matches: list[tuple[int, int]] = []

        # keep surviving pairs from the previous frame
        pr_index = {pid: j for j, pid in enumerate(pr_ids)}
        for gi, gid in enumerate(gt_ids):
            pid = carry.get(gid)
            if pid is None or pid not in pr_index:
                continue
            pj = pr_index[pid]
            if ious[gi, pj] >= iou_match:
                matches.append((gid, pid))
                matched_g.add(gi)
                matched_p.add(pj)

        # Hungarian over the rest
        rest_g = [i for i in range(len(gt_ids)) if i not in matched_g]
        rest_p = [j for j in range(len(pr_ids)) if j not in matched_p]
        if rest_g and rest_p:
            sub = ious[np.ix_(rest_g, rest_p)]
            cost = np.where(sub >= iou_match, 1.0 - sub, np.inf)
            finite = np.isfinite(cost)
            if finite.any():
                big = float(cost[finite].sum()) + 1.0
                rows, cols = linear_sum_assignment(np.where(finite, cost, big))
                for r, c in zip(rows, cols):
                    if finite[r, c]:
                        gi, pj = rest_g[r], rest_p[c]
                        matches.append((gt_ids[gi], pr_ids[pj]))
                        matched_g.add(gi)
                        matched_p.add(pj)

        matches.sort()
        per_frame[frame] = matches
        tp += len(matches)
        fn += len(gt_ids) - len(matched_g)
        fp += len(pr_ids) - len(matched_p)
        carry = dict(matches)
        for gid, pid in matches:
            previous = last_pred_for_gt.get(gid)
            if previous is not None and previous != pid:
                idsw += 1
            last_pred_for_gt[gid] = pid

    return ClearResult(idsw, tp, fp, fn, n_gt, per_frame)


@dataclass
class Idf1Result:
    idf1: float
    idtp: int
    idfp: int
    idfn: int


def eval_idf1(
    gt: Sequence[GroundTruthTrack],
    pred: Sequence[GroundTruthTrack],
    iou_match: float = 0.5,
) -> Idf1Result:
    """Global one-to-one trajectory matching maximizing frame overlap."""
    gt_frames = _frames_view(gt)
    pred_frames = _frames_view(pred)
    total_gt = sum(len(v[0]) for v in gt_frames.values())
    total_pred = sum(len(v[0]) for v in pred_frames.values())
    overlap: dict[tuple[int, int], int] = defaultdict(int)
    for frame, (gt_ids, gt_boxes) in gt_frames.items():
        if frame not in pred_frames:
            continue
        pr_ids, pr_boxes = pred_frames[frame]
        ious = iou_matrix(gt_boxes, pr_boxes)
        for i, gid in enumerate(gt_ids):
            for j, pid in enumerate(pr_ids):
                if ious[i, j] >= iou_match:
                    overlap[(gid, pid)] += 1

    idtp = 0
    if overlap:
        gids = sorted({g for g, _ in overlap})
        pids = sorted({p for _, p in overlap})
        mat = np.zeros((len(gids), len(pids)), dtype=np.int64)
        for (g, p), c in overlap.items():
            mat[gids.index(g), pids.index(p)] = c
        rows, cols = linear_sum_assignment(-mat)
        idtp = int(mat[rows, cols].sum())
    idfp = total_pred - idtp
    idfn = total_gt - idtp
    denom = 2 * idtp + idfp + idfn
    idf1 = (2 * idtp / denom) if denom > 0 else 1.0
    return Idf1Result(idf1, idtp, idfp, idfn)


@dataclass
class HotaResult:
    hota: float
    alphas: tuple[float, ...]
    det_a: tuple[float, ...]
    ass_a: tuple[float, ...]
    tp: tuple[int, ...]
    fn: tuple[int, ...]
    fp: tuple[int, ...]

    @property
    def per_alpha(self) -> tuple[float, ...]:
        return tuple(
            float(np.sqrt(d * a)) for d, a in zip(self.det_a, self.ass_a)
        )


def eval_hota(
    gt: Sequence[GroundTruthTrack],
    pred: Sequence[GroundTruthTrack],
    alphas: Sequence[float] = HOTA_ALPHAS,
) -> HotaResult:
    """Higher Order Tracking Accuracy averaged over localization thresholds."""
    gt_frames = _frames_view(gt)
    pred_frames = _frames_view(pred)
    frames = sorted(set(gt_frames) | set(pred_frames))
    gids = sorted({t.gt_track_id for t in gt if t.boxes})
    pids = sorted({t.gt_track_id for t in pred if t.boxes})
    gidx = {g: i for i, g in enumerate(gids)}
    pidx = {p: i for i, p in enumerate(pids)}
    n_g, n_p = len(gids), len(pids)

    if n_g == 0 and n_p == 0:
        ones = tuple(1.0 for _ in alphas)
        zeros = tuple(0 for _ in alphas)
        return HotaResult(1.0, tuple(alphas), ones, ones, zeros, zeros, zeros)

    gt_count = np.zeros(n_g)
    pred_count = np.zeros(n_p)
    potential = np.zeros((n_g, n_p))
    sims: dict[int, np.ndarray] = {}
    for frame in frames:
        g_ids, g_boxes = gt_frames.get(frame, ([], np.zeros((0, 4))))
        p_ids, p_boxes = pred_frames.get(frame, ([], np.zeros((0, 4))))
        sim = iou_matrix(g_boxes, p_boxes)
        sims[frame] = sim
        for gid in g_ids:
            gt_count[gidx[gid]] += 1
        for pid in p_ids:
            pred_count[pidx[pid]] += 1
        if sim.size:
            denom = sim.sum(axis=0)[None, :] + sim.sum(axis=1)[:, None] - sim
            ratio = np.zeros_like(sim)
            np.divide(sim, denom, out=ratio, where=denom > np.finfo(float).eps)
            rows = [gidx[g] for g in g_ids]
            cols = [pidx[p] for p in p_ids]
            potential[np.ix_(rows, cols)] += ratio

    alignment = potential / np.maximum(
        gt_count[:, None] + pred_count[None, :] - potential, 1e-12
    )

    n_alpha = len(alphas)
    tp = np.zeros(n_alpha, dtype=np.int64)
    fn = np.zeros(n_alpha, dtype=np.int64)
    fp = np.zeros(n_alpha, dtype=np.int64)
    match_counts = [np.zeros((n_g, n_p), dtype=np.int64) for _ in alphas]
    eps = np.finfo(float).eps
    for frame in frames:
        g_ids, _ = gt_frames.get(frame, ([], None))
        p_ids, _ = pred_frames.get(frame, ([], None))
        sim = sims[frame]
        if sim.size:
            rows = [gidx[g] for g in g_ids]
            cols = [pidx[p] for p in p_ids]
            score = alignment[np.ix_(rows, cols)] * sim
            mr, mc = linear_sum_assignment(-score)
        else:
            mr = mc = np.zeros(0, dtype=np.int64)
        for a, alpha in enumerate(alphas):
            keep = sim[mr, mc] >= alpha - eps if len(mr) else np.zeros(0, dtype=bool)
            n_match = int(keep.sum())
            tp[a] += n_match
            fn[a] += len(g_ids) - n_match
            fp[a] += len(p_ids) - n_match
            for r, c in zip(mr[keep], mc[keep]):
                match_counts[a][gidx[g_ids[r]], pidx[p_ids[c]]] += 1

    det_a = []
    ass_a = []
    for a in range(n_alpha):
        denom = tp[a] + fn[a] + fp[a]
        det_a.append(tp[a] / denom if denom > 0 else 0.0)
        counts = match_counts[a]
        union = np.maximum(gt_count[:, None] + pred_count[None, :] - counts, 1.0)
        pair_acc = counts / union
        ass_a.append(
            float((counts * pair_acc).sum() / tp[a]) if tp[a] > 0 else 0.0
        )
    hota_alpha = [float(np.sqrt(d * s)) for d, s in zip(det_a, ass_a)]
    return HotaResult(
        float(np.mean(hota_alpha)),
        tuple(alphas),
        tuple(det_a),
        tuple(ass_a),
        tuple(int(v) for v in tp),
        tuple(int(v) for v in fn),
        tuple(int(v) for v in fp),
    )


@dataclass
class MotMetrics:
    hota: float
    idf1: float
    idsw: int
    clear: ClearResult
    idf1_detail: Idf1Result
    hota_detail: HotaResult


def evaluate_mot(
    gt: Sequence[GroundTruthTrack],
    pred: Sequence[GroundTruthTrack],
    iou_match: float = 0.5,
) -> MotMetrics:
    clear = eval_clear(gt, pred, iou_match)
    idf1 = eval_idf1(gt, pred, iou_match)
    hota = eval_hota(gt, pred)
    return MotMetrics(hota.hota, idf1.idf1, clear.idsw, clear, idf1, hota)

"""Slow, obviously-correct reference implementations used by the verify suites and tests.

None of these share code with the production paths they check.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def brute_force_assignment(cost) -> float:
    """Minimum total cost over every injective map from the smaller side into the larger."""
    cost = np.asarray(cost, dtype=np.float64)
    k, t = cost.shape
    if k >= t:
        return min(math.fsum(cost[q, j] for j, q in enumerate(perm)) for perm in itertools.permutations(range(k), t))
    return min(math.fsum(cost[i, j] for i, j in enumerate(perm)) for perm in itertools.permutations(range(t), k))


def union_find_clusters(points, eps: float) -> np.ndarray:
    """Connected components of the eps-graph, numbered by first member.

    With a minimum cluster size of 1 every point is a core point, so DBSCAN
    reduces to exactly this partition.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if math.dist(pts[i], pts[j]) <= eps:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    labels = np.empty(n, dtype=np.int64)
    seen = {}
    for i in range(n):
        labels[i] = seen.setdefault(find(i), len(seen))
    return labels


def check_fps_picks(positions, picks) -> list:
    """Indices into ``picks`` where the chosen point is not a max-min choice (exhaustive scan).

    Distances are recomputed independently, so agreement is required to 1e-12 relative.
    """
    pts = np.asarray(positions, dtype=np.float64)
    bad = []
    for step in range(1, len(picks)):
        chosen = picks[:step]
        best = max(min(math.dist(p, pts[c]) for c in chosen) for p in pts)
        got = min(math.dist(pts[picks[step]], pts[c]) for c in chosen)
        if got < best * (1 - 1e-12):
            bad.append(step)
    return bad


def group_by_voxel(positions, colors, voxel_size: float) -> dict:
    """Map integer voxel key -> mean color via a plain dictionary."""
    groups = {}
    for p, c in zip(np.asarray(positions), np.asarray(colors)):
        key = tuple(int(v) for v in np.floor(p / voxel_size))
        groups.setdefault(key, []).append(c)
    return {k: np.mean(np.array(v), axis=0) for k, v in groups.items()}


def _iou(a, b) -> float:
    sa, sb = set(np.flatnonzero(a)), set(np.flatnonzero(b))
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


def pr_curve_ap(scenes_preds, scenes_gts, iou_threshold: float) -> dict:
    """Per-class AP from an explicit precision/recall curve.

    Predictions of one class are ranked by confidence (stable in scene then
    list order); each greedily claims its best-overlapping free ground truth.
    AP sums recall increments times the best precision at that recall or beyond.
    """
    out = {}
    classes = sorted({g.class_id for gts in scenes_gts for g in gts})
    for c in classes:
        n_gt = sum(g.class_id == c for gts in scenes_gts for g in gts)
        dets = [(p.confidence, s, p) for s, preds in enumerate(scenes_preds) for p in preds if p.class_id == c]
        dets = sorted(dets, key=lambda d: -d[0])
        used = set()
        hits = []
        for _, s, p in dets:
            cands = [(_iou(p.point_mask, g.point_mask), j) for j, g in enumerate(scenes_gts[s])
                     if g.class_id == c and (s, j) not in used]
            best = max(cands, key=lambda x: (x[0], -x[1]), default=(0.0, None))
            if best[1] is not None and best[0] >= iou_threshold:
                used.add((s, best[1]))
                hits.append(True)
            else:
                hits.append(False)
        precision, recall = [], []
        tp = 0
        for i, h in enumerate(hits, start=1):
            tp += h
            precision.append(tp / i)
            recall.append(tp / n_gt)
        ap, prev_r = 0.0, 0.0
        for k in range(len(hits)):
            if recall[k] > prev_r:
                ap += (recall[k] - prev_r) * max(precision[k:])
                prev_r = recall[k]
        out[c] = ap
    return out


def pr_curve_map(scenes_preds, scenes_gts) -> tuple:
    """(mAP, mAP50, mAP25) from :func:`pr_curve_ap`."""
    def mean_ap(t):
        aps = pr_curve_ap(scenes_preds, scenes_gts, t)
        return sum(aps.values()) / len(aps)

    thresholds = [0.5 + 0.05 * i for i in range(10)]
    return sum(mean_ap(round(t, 2)) for t in thresholds) / 10, mean_ap(0.5), mean_ap(0.25)

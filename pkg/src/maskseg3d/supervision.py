"""Set-matching supervision: mask and class losses, the matching cost and Hungarian assignment."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, UsageError

BCE_EPS = 1e-12
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    dice: float = 2.0
    bce: float = 5.0
    cls: float = 2.0
    no_object: float = 0.1

    def __post_init__(self):
        if min(self.dice, self.bce, self.cls, self.no_object) <= 0:
            raise ConfigError("loss weights must be positive")


@dataclass
class GroundTruthInstance:
    mask: np.ndarray  # bool over M0 voxels
    class_id: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise UsageError("ground-truth instance has an empty mask")


@dataclass
class Assignment:
    pairs: list  # (query, target), sorted by query index
    unmatched_queries: list
    total_cost: float
    unmatched_targets: list = field(default_factory=list)

    @property
    def query_index(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def target_index(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)


# ------------------------------------------------------------------ per-mask losses


def dice_loss(heat: ad.Tensor, gt) -> ad.Tensor:
    """Soft dice per row, 1 - (2 sum(p g) + 1) / (sum p + sum g + 1); returns a vector for 2-D input."""
    g = np.asarray(gt, dtype=np.float64)
    inter = ad.sum(ad.mul(heat, ad.constant(g)), axis=-1)
    num = ad.add(ad.scale(inter, 2.0), DICE_SMOOTH)
    den = ad.add(ad.sum(heat, axis=-1), ad.constant(g.sum(axis=-1) + DICE_SMOOTH))
    return ad.sub(1.0, ad.mul(num, reciprocal(den)))


def reciprocal(x: ad.Tensor) -> ad.Tensor:
    out = 1.0 / x.data
    return ad._make(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def bce_mask_loss(heat: ad.Tensor, gt) -> ad.Tensor:
    """Mean binary cross-entropy over voxels (per row for 2-D input); probabilities clamped by 1e-12."""
    g = np.asarray(gt, dtype=np.float64)
    p = ad.clip(heat, BCE_EPS, 1.0 - BCE_EPS)
    pos = ad.mul(ad.log(p), ad.constant(g))
    neg = ad.mul(ad.log(ad.sub(1.0, p)), ad.constant(1.0 - g))
    return ad.scale(ad.mean(ad.add(pos, neg), axis=-1), -1.0)


def class_ce_loss(logits: ad.Tensor, targets, weights: LossWeights | None = None) -> ad.Tensor:
    """Cross-entropy per row; the no-object target (index C) is scaled by ``weights.no_object``.

    ``logits`` is (C+1,) or (K, C+1); ``targets`` matches the leading shape.
    """
    w = weights or LossWeights()
    single = logits.ndim == 1
    lg = ad.reshape(logits, (1, -1)) if single else logits
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n_cls = lg.shape[1]
    if np.any(t < 0) or np.any(t >= n_cls):
        raise UsageError(f"class target out of range [0, {n_cls - 1}]")
    logp = ad.log_softmax(lg)
    nll = ad.scale(ad.take(logp, np.arange(len(t)), t), -1.0)
    scaleby = np.where(t == n_cls - 1, w.no_object, 1.0)
    out = ad.mul(nll, ad.constant(scaleby))
    return ad.reshape(out, ()) if single else out


# ------------------------------------------------------------------ matching


def _log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cost_matrix(class_logits: np.ndarray, heatmap: np.ndarray, gt_masks: np.ndarray, gt_classes,
                weights: LossWeights | None = None) -> np.ndarray:
    """K x K_hat cost: dice, BCE and class CE weighted as in training, without no-object scaling."""
    w = weights or LossWeights()
    P = np.asarray(heatmap, dtype=np.float64)
    G = np.asarray(gt_masks, dtype=np.float64)
    if P.shape[1] != G.shape[1]:
        raise UsageError("heatmap and ground-truth masks cover different voxel counts")
    dice = 1.0 - (2.0 * P @ G.T + DICE_SMOOTH) / (P.sum(1)[:, None] + G.sum(1)[None, :] + DICE_SMOOTH)
    Pc = np.clip(P, BCE_EPS, 1.0 - BCE_EPS)
    bce = -(np.log(Pc) @ G.T + np.log(1.0 - Pc) @ (1.0 - G).T) / P.shape[1]
    ce = -_log_softmax_np(np.asarray(class_logits, dtype=np.float64))[:, np.asarray(gt_classes, dtype=np.int64)]
    return w.dice * dice + w.bce * bce + w.cls * ce


def _assign_rows(cost: np.ndarray) -> tuple:
    """Min-cost assignment of every row to a distinct column (rows <= cols).

    Shortest augmenting paths with dual potentials; columns are scanned in
    index order.  Returns ``(row_to_col, u, v)`` with reduced costs
    ``cost - u[:, None] - v[None, :] >= 0`` (up to rounding), ``v <= 0`` and
    ``v == 0`` on free columns.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _pairs_cost(c: np.ndarray, pairs) -> float:
    return math.fsum(c[q, t] for q, t in pairs)


def _lex_canonical(c: np.ndarray, pairs: list, u: np.ndarray, v: np.ndarray, targets_are_rows: bool) -> list:
    """Among optimal matchings, the one whose sorted (query, target) list is lexicographically smallest.

    Queries are decided in index order, each taking the lowest target that
    still admits an optimal completion (or staying unmatched if none does).
    The dual bound ``cost >= optimum + reduced_cost(q, t)`` rules out almost
    every candidate; the rest are settled by an exact restricted re-solve.
    """
    K, T = c.shape
    best = _pairs_cost(c, pairs)
    reduced = (c.T - u[:, None] - v[None, :]).T if targets_are_rows else c - u[:, None] - v[None, :]
    tol = 1e-7 * max(1.0, float(np.max(np.abs(c)))) * (K + T)
    cur = dict(pairs)
    fixed, free_t = [], list(range(T))
    for q in range(K):
        if not free_t:
            break
        chosen = None
        for t in free_t:
            if cur.get(q) == t:
                chosen = t
                break
            if reduced[q, t] > tol:
                continue
            rest_t = [x for x in free_t if x != t]
            rest_q = list(range(q + 1, K))
            if targets_are_rows and len(rest_t) > len(rest_q):
                continue
            trial = fixed + [(q, t)] + _solve_sub(c, rest_q, rest_t, targets_are_rows)
            if len(trial) == len(pairs) and _pairs_cost(c, trial) == best:
                chosen, cur = t, dict(trial)
                break
        if chosen is not None:
            fixed.append((q, chosen))
            free_t.remove(chosen)
    return fixed


def _solve_sub(c: np.ndarray, rows_q: list, cols_t: list, targets_are_rows: bool) -> list:
    if not rows_q or not cols_t:
        return []
    sub = c[np.ix_(rows_q, cols_t)]
    if targets_are_rows:
        t_to_q = _assign_rows(sub.T)[0]
        return [(rows_q[int(q)], cols_t[t]) for t, q in enumerate(t_to_q)]
    q_to_t = _assign_rows(sub)[0]
    return [(rows_q[q], cols_t[int(t)]) for q, t in enumerate(q_to_t)]


def hungarian(cost) -> Assignment:
    """Minimum-cost injective matching between queries (rows) and targets (columns).

    Ties between optimal matchings go to the lexicographically smallest list
    of (query, target) pairs.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise UsageError("cost must be a matrix")
    K, T = c.shape
    if K == 0 or T == 0:
        return Assignment([], list(range(K)), 0.0, list(range(T)))
    if not np.all(np.isfinite(c)):
        raise UsageError("cost matrix has non-finite entries")
    if K >= T:
        t_to_q, u, v = _assign_rows(c.T)
        pairs = sorted((int(q), t) for t, q in enumerate(t_to_q))
        pairs = _lex_canonical(c, pairs, u, v, targets_are_rows=True)
        unmatched_targets = []
    else:
        warnings.warn(f"fewer queries ({K}) than targets ({T}); {T - K} targets left unmatched", stacklevel=2)
        q_to_t, u, v = _assign_rows(c)
        pairs = [(q, int(t)) for q, t in enumerate(q_to_t)]
        pairs = _lex_canonical(c, pairs, u, v, targets_are_rows=False)
        matched = {t for _, t in pairs}
        unmatched_targets = [t for t in range(T) if t not in matched]
    matched_q = {q for q, _ in pairs}
    total = _pairs_cost(c, pairs)
    return Assignment(pairs, [q for q in range(K) if q not in matched_q], total, unmatched_targets)


# ------------------------------------------------------------------ objective


def stack_targets(targets: list, num_voxels: int) -> tuple:
    if not targets:
        return np.zeros((0, num_voxels), dtype=bool), np.zeros(0, dtype=np.int64)
    masks = np.stack([t.mask for t in targets])
    if masks.shape[1] != num_voxels:
        raise UsageError("ground-truth masks do not cover the voxel grid")
    return masks, np.array([t.class_id for t in targets], dtype=np.int64)


def layer_loss(pred, targets: list, weights: LossWeights, num_classes: int) -> tuple:
    """Loss of one prediction set after its own Hungarian matching; returns (loss, assignment)."""
    K = pred.class_logits.shape[0]
    masks, classes = stack_targets(targets, pred.heatmap.shape[1])
    cls_target = np.full(K, num_classes, dtype=np.int64)
    terms = []
    if len(targets):
        assign = hungarian(cost_matrix(pred.class_logits.data, pred.heatmap.data, masks, classes, weights))
        qi, ti = assign.query_index, assign.target_index
        matched = ad.take_rows(pred.heatmap, qi)
        gt = masks[ti]
        terms.append(ad.scale(ad.sum(bce_mask_loss(matched, gt)), weights.bce))
        terms.append(ad.scale(ad.sum(dice_loss(matched, gt)), weights.dice))
        cls_target[qi] = classes[ti]
    else:
        assign = Assignment([], list(range(K)), 0.0)
    terms.append(ad.scale(ad.sum(class_ce_loss(pred.class_logits, cls_target, weights)), weights.cls))
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return loss, assign


def total_loss(all_layer_preds: list, targets: list, weights: LossWeights | None = None,
               num_classes: int | None = None, return_terms: bool = False):
    """Sum of independently matched per-layer losses over every auxiliary prediction."""
    w = weights or LossWeights()
    if num_classes is None:
        num_classes = all_layer_preds[0].class_logits.shape[1] - 1
    per_layer = [layer_loss(p, targets, w, num_classes)[0] for p in all_layer_preds]
    total = per_layer[0]
    for t in per_layer[1:]:
        total = ad.add(total, t)
    if return_terms:
        return total, [t.item() for t in per_layer]
    return total

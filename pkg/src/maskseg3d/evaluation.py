"""Confidence scoring, postprocessing and instance-segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .geometry import NO_INSTANCE, VoxelGrid, dbscan

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
DBSCAN_EPS = {"indoor": 0.9, "s3dis": 0.6, "aerial": 14.0, "synthetic": 0.9}
CONFIDENCE_FILTER = 0.8


@dataclass
class InstancePrediction:
    point_mask: np.ndarray  # bool over N points
    class_id: int
    confidence: float


@dataclass
class GroundTruth:
    point_mask: np.ndarray
    class_id: int


@dataclass
class EvalReport:
    mAP: float
    mAP50: float
    mAP25: float
    mPrec50: float
    mRec50: float
    per_class_ap: dict = field(default_factory=dict)  # class -> {threshold: AP}
    degenerate: bool = False

    KEYS = ("mAP", "mAP50", "mAP25", "mPrec50", "mRec50")

    def to_text(self, config_hash: str | None = None) -> str:
        lines = ["format: maskseg3d-eval v1"]
        if config_hash:
            lines.append(f"config_hash: {config_hash}")
        for k in self.KEYS:
            lines.append(f"{k}: {getattr(self, k):.6f}")
        lines.append(f"degenerate: {int(self.degenerate)}")
        for c in sorted(self.per_class_ap):
            aps = self.per_class_ap[c]
            lines.append(f"class_{c}_AP: {np.mean(list(aps.values())):.6f}")
            lines.append(f"class_{c}_AP50: {aps[0.5]:.6f}")
            lines.append(f"class_{c}_AP25: {aps[0.25]:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_text(cls, text: str) -> dict:
        out = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise FormatError(f"malformed report line: {line!r}")
            out[key.strip()] = value.strip()
        return out


def confidence(class_probs: np.ndarray, heatmap_row: np.ndarray, min_class_prob: float = 0.0):
    """Class probability times mean heatmap inside the binarised mask.

    Returns ``(class_id, c)`` or ``None`` when the query predicts no-object,
    its class probability is below ``min_class_prob``, or its mask is empty.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    cls = int(np.argmax(probs))
    if cls == len(probs) - 1 or probs[cls] < min_class_prob:
        return None
    m = np.asarray(heatmap_row, dtype=np.float64)
    active = m > 0.5
    if not active.any():
        return None
    return cls, float(probs[cls] * m[active].mean())


def postprocess(class_probs: np.ndarray, heatmap: np.ndarray, grid: VoxelGrid, eps: float = 0.9,
                enable_dbscan: bool = True, min_class_prob: float = 0.0) -> list:
    """Turn per-query outputs into point-level instance predictions.

    With DBSCAN enabled each spatially separate cluster of a mask becomes
    its own prediction, rescored on its own voxels.
    """
    centres = grid.centers()
    out = []
    for k in range(len(heatmap)):
        scored = confidence(class_probs[k], heatmap[k], min_class_prob)
        if scored is None:
            continue
        cls, _ = scored
        row = heatmap[k]
        active = np.nonzero(row > 0.5)[0]
        if enable_dbscan:
            labels = dbscan(centres[active], eps, min_size=1)
            groups = [active[labels == lab] for lab in range(labels.max() + 1)]
        else:
            groups = [active]
        p_cls = float(class_probs[k][cls])
        for vox in groups:
            vmask = np.zeros(len(row), dtype=bool)
            vmask[vox] = True
            out.append(InstancePrediction(vmask[grid.point_to_voxel], cls, p_cls * float(row[vox].mean())))
    return out


def ground_truth_instances(instance_id: np.ndarray, semantic_id: np.ndarray) -> list:
    out = []
    for i in np.unique(instance_id):
        if i == NO_INSTANCE:
            continue
        m = instance_id == i
        out.append(GroundTruth(m, int(semantic_id[m][0])))
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def _iou_matrix(preds: list, gts: list) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    P = np.stack([p.point_mask for p in preds]).astype(np.float64)
    G = np.stack([g.point_mask for g in gts]).astype(np.float64)
    inter = P @ G.T
    union = P.sum(1)[:, None] + G.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(scenes_preds: list, scenes_gts: list, iou_threshold: float) -> dict:
    """Per-class AP over a batch of scenes at one IoU threshold.

    Predictions are ranked by confidence across all scenes (ties by scene,
    then list order); each takes the unmatched same-class ground truth of its
    scene with the highest IoU, if that IoU reaches the threshold.  Classes
    without ground truth are omitted.
    """
    classes = sorted({g.class_id for gts in scenes_gts for g in gts})
    ious = [_iou_matrix(p, g) for p, g in zip(scenes_preds, scenes_gts)]
    result = {}
    for c in classes:
        n_gt = sum(1 for gts in scenes_gts for g in gts if g.class_id == c)
        ranked = [(-p.confidence, s, i) for s, preds in enumerate(scenes_preds)
                  for i, p in enumerate(preds) if p.class_id == c]
        ranked.sort()
        taken = [np.zeros(len(g), dtype=bool) for g in scenes_gts]
        tp = np.zeros(len(ranked))
        for r, (_, s, i) in enumerate(ranked):
            best, best_j = -1.0, -1
            for j, g in enumerate(scenes_gts[s]):
                if g.class_id != c or taken[s][j]:
                    continue
                if ious[s][i, j] > best:
                    best, best_j = ious[s][i, j], j
            if best_j >= 0 and best >= iou_threshold:
                taken[s][best_j] = True
                tp[r] = 1.0
        result[c] = _interpolated_ap(tp, n_gt)
    return result


def _precision_recall_counts(scenes_preds, scenes_gts, iou_threshold):
    """Per-class TP/FP/FN with one-to-one matching by descending IoU (no confidence ranking)."""
    counts = {}
    for preds, gts in zip(scenes_preds, scenes_gts):
        iou = _iou_matrix(preds, gts)
        for c in {p.class_id for p in preds} | {g.class_id for g in gts}:
            pi = [i for i, p in enumerate(preds) if p.class_id == c]
            gi = [j for j, g in enumerate(gts) if g.class_id == c]
            cand = sorted(((-iou[i, j], i, j) for i in pi for j in gi if iou[i, j] >= iou_threshold))
            used_p, used_g = set(), set()
            for _, i, j in cand:
                if i in used_p or j in used_g:
                    continue
                used_p.add(i)
                used_g.add(j)
            tp, fp, fn = counts.get(c, (0, 0, 0))
            counts[c] = (tp + len(used_p), fp + len(pi) - len(used_p), fn + len(gi) - len(used_g))
    return counts


def map_suite(scenes_preds: list, scenes_gts: list, confidence_filter: float = CONFIDENCE_FILTER) -> EvalReport:
    """mAP over IoU 0.50:0.05:0.95, mAP50, mAP25, and mPrec50 / mRec50 on confident predictions."""
    n_gt = sum(len(g) for g in scenes_gts)
    n_pred = sum(len(p) for p in scenes_preds)
    if n_gt == 0:
        value = 1.0 if n_pred == 0 else 0.0
        return EvalReport(value, value, value, value, value, {}, degenerate=True)
    thresholds = [float(t) for t in IOU_THRESHOLDS] + [0.25]
    per_thr = {t: average_precision(scenes_preds, scenes_gts, t) for t in thresholds}
    classes = sorted(per_thr[0.5])
    per_class = {c: {t: per_thr[t][c] for t in thresholds} for c in classes}
    mean_at = {t: float(np.mean(list(per_thr[t].values()))) for t in thresholds}
    m_ap = float(np.mean([mean_at[float(t)] for t in IOU_THRESHOLDS]))

    confident = [[p for p in preds if p.confidence >= confidence_filter] for preds in scenes_preds]
    counts = _precision_recall_counts(confident, scenes_gts, 0.5)
    precisions = [tp / (tp + fp) for tp, fp, _ in counts.values() if tp + fp > 0]
    recalls = [tp / (tp + fn) for tp, _, fn in counts.values() if tp + fn > 0]
    return EvalReport(
        mAP=m_ap,
        mAP50=mean_at[0.5],
        mAP25=mean_at[0.25],
        mPrec50=float(np.mean(precisions)) if precisions else 0.0,
        mRec50=float(np.mean(recalls)) if recalls else 0.0,
        per_class_ap=per_class,
    )

"""Class-agnostic 3D instance segmentation metrics (AP25 / AP50 / mAP@[.5:.95])."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .scene import InstanceLabeling3D

MAP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


def instance_iou(pred, gt, void=None) -> float:
    """|pred & gt| / |pred | gt|; points in ``void`` are dropped from ``pred`` first."""
    p = np.unique(np.asarray(pred, dtype=np.int64))
    g = np.unique(np.asarray(gt, dtype=np.int64))
    if len(p) == 0 and len(g) == 0:
        raise ValueError("IoU of two empty sets is undefined")
    if void is not None:
        p = np.setdiff1d(p, np.asarray(void, dtype=np.int64), assume_unique=True)
    inter = len(np.intersect1d(p, g, assume_unique=True))
    union = len(p) + len(g) - inter
    return inter / union if union else 0.0


def ranking(scores: Sequence[float], sizes: Sequence[int]) -> np.ndarray:
    """Prediction order: score descending, then size descending, then index."""
    scores = np.asarray(scores, dtype=float)
    sizes = np.asarray(sizes)
    return np.lexsort((np.arange(len(scores)), -sizes, -scores))


def ap_from_matches(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if num_gt == 0:
        raise ValueError("no ground-truth instances")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    # precision envelope from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def greedy_matches(iou: np.ndarray, order: np.ndarray, thresh: float) -> np.ndarray:
    """Walk predictions in ``order``; each takes the best still-free GT at IoU >= thresh."""
    free = np.ones(iou.shape[1], dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for r, p in enumerate(order):
        if not free.any():
            break
        cand = np.where(free, iou[p], -1.0)
        g = int(np.argmax(cand))
        if cand[g] >= thresh:
            free[g] = False
            tp[r] = True
    return tp


def average_precision(preds: Sequence, gts: Sequence, iou_thresh: float, scores=None, void=None) -> float:
    """AP of scored point-set predictions against GT point sets at one IoU threshold."""
    if len(gts) == 0:
        raise ValueError("no ground-truth instances")
    if len(preds) == 0:
        return 0.0
    scores = np.ones(len(preds)) if scores is None else np.asarray(scores, dtype=float)
    iou = np.array([[instance_iou(p, g, void) for g in gts] for p in preds])
    order = ranking(scores, [len(p) for p in preds])
    return ap_from_matches(greedy_matches(iou, order, iou_thresh), len(gts))


def iou_matrix(pred: InstanceLabeling3D, gt: InstanceLabeling3D) -> np.ndarray:
    """IoU between every predicted and GT instance; GT-unlabelled points are ignored
    on the prediction side."""
    p, g = pred.labels, gt.labels
    kp, kg = pred.num_instances + 1, gt.num_instances + 1
    table = np.bincount(p * kg + g, minlength=kp * kg).reshape(kp, kg)
    inter = table[1:, 1:]
    pred_size = table[1:, 1:].sum(axis=1)  # excludes points GT marks unlabelled
    gt_size = table[:, 1:].sum(axis=0)
    union = pred_size[:, None] + gt_size[None, :] - inter
    return np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)


@dataclass
class EvalResult:
    mAP: float
    AP50: float
    AP25: float
    per_threshold: dict[str, float] = field(default_factory=dict)
    per_scene: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        lines = [f"{'':<12}{'mAP':>8}{'AP50':>8}{'AP25':>8}"]
        for s in self.per_scene:
            lines.append(f"{str(s.get('scene', '')):<12}{s['mAP']:>8.3f}{s['AP50']:>8.3f}{s['AP25']:>8.3f}")
        lines.append(f"{'mean':<12}{self.mAP:>8.3f}{self.AP50:>8.3f}{self.AP25:>8.3f}")
        return "\n".join(lines)


def evaluate(pred: InstanceLabeling3D, gt: InstanceLabeling3D) -> EvalResult:
    if len(pred.labels) != len(gt.labels):
        raise ValueError(f"prediction covers {len(pred.labels)} points, ground truth {len(gt.labels)}")
    if gt.num_instances == 0:
        raise ValueError("no ground-truth instances")
    iou = iou_matrix(pred, gt)
    sizes = np.bincount(pred.labels, minlength=pred.num_instances + 1)[1:]
    scores = pred.scores if pred.scores is not None else np.ones(pred.num_instances)
    order = ranking(scores, sizes)
    per = {}
    for t in sorted(set(MAP_THRESHOLDS) | {0.25}):
        per[f"{t:.2f}"] = ap_from_matches(greedy_matches(iou, order, t), gt.num_instances)
    m = float(np.mean([per[f"{t:.2f}"] for t in MAP_THRESHOLDS]))
    return EvalResult(m, per["0.50"], per["0.25"], per)


def mean_results(results: Sequence[EvalResult], names: Optional[Sequence] = None) -> EvalResult:
    """Average of per-scene results (each scene weighted equally)."""
    names = list(names) if names is not None else list(range(len(results)))
    per_scene = [{"scene": n, "mAP": r.mAP, "AP50": r.AP50, "AP25": r.AP25} for n, r in zip(names, results)]
    keys = results[0].per_threshold.keys() if results else []
    per = {k: float(np.mean([r.per_threshold[k] for r in results])) for k in keys}
    return EvalResult(
        float(np.mean([r.mAP for r in results])) if results else 0.0,
        float(np.mean([r.AP50 for r in results])) if results else 0.0,
        float(np.mean([r.AP25 for r in results])) if results else 0.0,
        per, per_scene,
    )

"""Grounding accuracy (Acc@tau, mAcc) and COCO-style detection AP."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .refdb import BoundingBox

# Acc@tau is averaged over these thresholds to form mAcc.
GROUNDING_TAUS = tuple(round(0.50 + 0.05 * i, 2) for i in range(9))
# AP averages over the standard 0.50:0.95 sweep.
AP_TAUS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
_RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class EvalError(ValueError):
    pass


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two half-open pixel rectangles."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    return inter / union


def acc_at(predictions, tau: float, strict: bool = True) -> float:
    """Fraction of (predicted, ground-truth) pairs whose IoU beats tau.

    A missing prediction (None) counts as IoU 0. `strict=True` uses a strict
    inequality at the threshold; flip it for toolkit-style >= matching.
    """
    if not 0.0 < tau < 1.0:
        raise EvalError(f"tau must lie in (0, 1), got {tau}")
    pairs = list(predictions)
    if not pairs:
        raise EvalError("no predictions to score")
    hits = 0
    for pred_box, gt_box in pairs:
        value = iou(pred_box, gt_box) if pred_box is not None else 0.0
        hits += value > tau if strict else value >= tau
    return hits / len(pairs)


def macc(predictions, strict: bool = True) -> float:
    """Mean of Acc@tau over the 0.50..0.90 threshold ladder."""
    values = [acc_at(predictions, tau, strict=strict) for tau in GROUNDING_TAUS]
    return sum(values) / len(values)


@dataclass
class ExpressionResult:
    image: str
    expression_id: int
    iou: float
    correct: bool  # at tau = 0.5


@dataclass
class GroundingReport:
    acc: dict[float, float]
    macc: float
    per_expression: list[ExpressionResult]

    def to_dict(self) -> dict:
        return {
            "acc": {f"{tau:.2f}": value for tau, value in self.acc.items()},
            "macc": self.macc,
            "per_expression": [
                {
                    "image": r.image,
                    "expression_id": r.expression_id,
                    "iou": r.iou,
                    "correct": r.correct,
                }
                for r in self.per_expression
            ],
        }


def evaluate_grounding(
    predictions: dict[tuple[str, int], BoundingBox | None],
    ground_truth: dict[tuple[str, int], BoundingBox],
    strict: bool = True,
) -> GroundingReport:
    """Score predicted boxes against ground truth, both keyed by
    (image_key, expression_id). Expressions without a prediction score IoU 0."""
    if not ground_truth:
        raise EvalError("no annotations to evaluate")
    pairs = []
    per_expression = []
    for key in sorted(ground_truth):
        gt_box = ground_truth[key]
        pred = predictions.get(key)
        value = iou(pred, gt_box) if pred is not None else 0.0
        pairs.append((pred, gt_box))
        per_expression.append(
            ExpressionResult(
                image=key[0],
                expression_id=key[1],
                iou=value,
                correct=(value > 0.5 if strict else value >= 0.5),
            )
        )
    acc = {tau: acc_at(pairs, tau, strict=strict) for tau in GROUNDING_TAUS}
    return GroundingReport(
        acc=acc,
        macc=sum(acc.values()) / len(acc),
        per_expression=per_expression,
    )


@dataclass(frozen=True)
class EvalDetection:
    image: str
    category: int
    box: BoundingBox
    score: float


@dataclass(frozen=True)
class EvalTruth:
    image: str
    category: int
    box: BoundingBox


def _interpolated_ap(tp: np.ndarray, n_positive: int) -> float:
    """101-point interpolated AP from score-ordered true-positive flags."""
    if n_positive == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1 - tp)
    recall = cum_tp / n_positive
    precision = cum_tp / (cum_tp + cum_fp)
    # Precision envelope from the right, then sample at the 101 recall points.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, _RECALL_POINTS, side="left")
    sampled = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(sampled.mean())


def _match_category(dets: list[EvalDetection], gts: list[EvalTruth], tau: float) -> tuple[np.ndarray, int]:
    """Greedy score-ordered matching; each ground truth matches at most once."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_by_image: dict[str, list[EvalTruth]] = {}
    for gt in gts:
        gt_by_image.setdefault(gt.image, []).append(gt)
    used: dict[str, set[int]] = {img: set() for img in gt_by_image}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        det = dets[i]
        candidates = gt_by_image.get(det.image, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(candidates):
            if j in used[det.image]:
                continue
            value = iou(det.box, gt.box)
            if value >= tau and value > best_iou:
                best_iou, best_j = value, j
        if best_j >= 0:
            used[det.image].add(best_j)
            tp[rank] = 1.0
    return tp, len(gts)


def average_precision(
    detections: list[EvalDetection],
    ground_truths: list[EvalTruth],
    iou_thresholds=AP_TAUS,
) -> dict:
    """COCO-style AP over categories present in the ground truth."""
    if not ground_truths:
        if detections:
            warnings.warn("detections given but no ground truth; AP is 0", stacklevel=2)
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0}

    categories = sorted({gt.category for gt in ground_truths})
    dets_by_cat = {c: [d for d in detections if d.category == c] for c in categories}
    gts_by_cat = {c: [g for g in ground_truths if g.category == c] for c in categories}

    def mean_ap(tau: float) -> float:
        values = []
        for c in categories:
            tp, n_pos = _match_category(dets_by_cat[c], gts_by_cat[c], tau)
            values.append(_interpolated_ap(tp, n_pos))
        return float(np.mean(values))

    per_tau = {tau: mean_ap(tau) for tau in set(iou_thresholds) | {0.5, 0.75}}
    return {
        "AP": float(np.mean([per_tau[tau] for tau in iou_thresholds])),
        "AP50": per_tau[0.5],
        "AP75": per_tau[0.75],
    }

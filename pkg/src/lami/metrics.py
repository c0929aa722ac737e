"""Detection metrics: COCO-style interpolated AP / AR@100 and region mean accuracy.

AP is the 101-point interpolated average precision, averaged over IoU
thresholds 0.50:0.05:0.95 and over categories with at least one ground-truth
instance. AR@100 is the recall with at most 100 detections per image (the
ranking stage already caps exports), averaged the same way. Novel-only
variants restrict the category set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from lami.errors import LamiError
from lami.inference import ImageDetections
from lami.toydata import Annotation

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


def _cxcywh_to_xyxy(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def _interpolated_ap(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """101-point interpolation: max precision at recall >= r for each grid r."""
    ap = 0.0
    for r in RECALL_GRID:
        mask = recalls >= r - 1e-12
        ap += float(precisions[mask].max()) if mask.any() else 0.0
    return ap / len(RECALL_GRID)


@dataclass(frozen=True)
class _CategoryEval:
    ap: float
    recall: float
    num_gt: int


def _evaluate_category(
    detections: list[tuple[int, tuple, float]],
    gt_by_image: dict[int, list[tuple]],
    threshold: float,
) -> _CategoryEval:
    num_gt = sum(len(v) for v in gt_by_image.values())
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])
    matched: dict[int, set[int]] = {img: set() for img in gt_by_image}
    tps = np.zeros(len(detections))
    for rank, i in enumerate(order):
        image_id, box, _score = detections[i]
        gts = gt_by_image.get(image_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(gts):
            if j in matched[image_id]:
                continue
            iou = _iou(box, gt_box)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            matched[image_id].add(best_j)
            tps[rank] = 1.0
    if num_gt == 0:
        return _CategoryEval(ap=0.0, recall=0.0, num_gt=0)
    if len(detections) == 0:
        return _CategoryEval(ap=0.0, recall=0.0, num_gt=num_gt)
    cum_tp = np.cumsum(tps)
    precisions = cum_tp / (np.arange(len(detections)) + 1.0)
    recalls = cum_tp / num_gt
    return _CategoryEval(
        ap=_interpolated_ap(recalls, precisions),
        recall=float(recalls[-1]),
        num_gt=num_gt,
    )


def evaluate_map(
    predictions: Sequence[ImageDetections],
    gt_annotations: Mapping[int, Sequence[Annotation]],
    base_ids: Iterable[int],
    novel_ids: Iterable[int],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> dict[str, float]:
    """COCO-style AP and AR@100 with base/novel breakdowns.

    Categories without any ground truth are excluded from every mean.
    Unknown prediction categories are an error.
    """
    base_ids, novel_ids = set(base_ids), set(novel_ids)
    vocabulary = base_ids | novel_ids
    for det in predictions:
        unknown = set(det.labels) - vocabulary
        if unknown:
            raise LamiError(f"predictions contain unknown category ids {sorted(unknown)}")

    det_by_cat: dict[int, list[tuple[int, tuple, float]]] = {c: [] for c in vocabulary}
    for det in predictions:
        for box, label, score in zip(det.boxes, det.labels, det.score):
            det_by_cat[label].append((det.image_id, _cxcywh_to_xyxy(box), float(score)))

    gt_by_cat: dict[int, dict[int, list[tuple]]] = {c: {} for c in vocabulary}
    for image_id, anns in gt_annotations.items():
        for ann in anns:
            if ann.category_id not in vocabulary:
                raise LamiError(f"ground truth contains unknown category id {ann.category_id}")
            gt_by_cat[ann.category_id].setdefault(image_id, []).append(
                _cxcywh_to_xyxy(ann.box)
            )

    ap_by_cat: dict[int, float] = {}
    ar_by_cat: dict[int, float] = {}
    for cat in sorted(vocabulary):
        if not gt_by_cat[cat]:
            continue  # no gt instances: excluded from the means
        evals = [
            _evaluate_category(det_by_cat[cat], gt_by_cat[cat], t) for t in iou_thresholds
        ]
        ap_by_cat[cat] = float(np.mean([e.ap for e in evals]))
        ar_by_cat[cat] = float(np.mean([e.recall for e in evals]))

    def mean_over(cats: set[int], table: dict[int, float]) -> float:
        values = [table[c] for c in cats if c in table]
        return float(np.mean(values)) if values else 0.0

    present = set(ap_by_cat)
    return {
        "AP": mean_over(present, ap_by_cat),
        "AP_base": mean_over(base_ids, ap_by_cat),
        "AP_novel": mean_over(novel_ids, ap_by_cat),
        "AR@100": mean_over(present, ar_by_cat),
        "AR_novel@100": mean_over(novel_ids, ar_by_cat),
    }


@dataclass(frozen=True)
class MeanAccuracyResult:
    overall: float
    per_category: Mapping[int, float]
    per_group: Mapping[str, float]
    skipped: tuple[int, ...]  # categories with zero instances


def mean_accuracy(
    gt_items: Sequence[tuple],
    classifier,
    groups: Mapping[str, Iterable[int]] | None = None,
) -> MeanAccuracyResult:
    """Pool each ground-truth box and classify by nearest classifier row.

    ``gt_items`` are (feature map, normalized cxcywh box, true category id)
    triples. Accuracy is averaged per category with equal weights; categories
    with zero instances are excluded and logged.
    """
    from lami.inference import pool_region_feature

    hits: dict[int, int] = {}
    totals: dict[int, int] = {}
    rows = classifier.rows.astype(np.float64)
    ids = np.asarray(classifier.ids)
    for fmap, box, label in gt_items:
        feature = pool_region_feature(fmap, box)
        sims = rows @ feature
        predicted = int(ids[int(np.argmax(sims))])
        totals[label] = totals.get(label, 0) + 1
        hits[label] = hits.get(label, 0) + (1 if predicted == label else 0)
    per_category = {c: hits.get(c, 0) / totals[c] for c in sorted(totals)}
    skipped = tuple(sorted(set(int(i) for i in ids) - set(totals)))
    if skipped:
        logger.info("categories with zero instances excluded from mean accuracy: %s", skipped)
    overall = float(np.mean(list(per_category.values()))) if per_category else 0.0
    per_group = {}
    for group_name, members in (groups or {}).items():
        values = [per_category[c] for c in members if c in per_category]
        per_group[group_name] = float(np.mean(values)) if values else 0.0
    return MeanAccuracyResult(
        overall=overall, per_category=per_category, per_group=per_group, skipped=skipped
    )

"""IoU, greedy NMS and COCO-style 101-point average precision."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgument

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    class_id: int
    box: Box  # cx, cy, w, h


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return min(1.0, float(inter / union)) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) cxcywh arrays."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    lo = np.maximum(a[:, None, :2] - a[:, None, 2:] / 2, b[None, :, :2] - b[None, :, 2:] / 2)
    hi = np.minimum(a[:, None, :2] + a[:, None, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2)
    wh = np.clip(hi - lo, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.clip(np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0), 0.0, 1.0)


def _order(scores: Sequence[float]) -> list[int]:
    # descending score, earlier index first on ties
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def nms(dets: Sequence, iou_thresh: float) -> list:
    """Greedy per-(image, class) suppression of IoU > ``iou_thresh``.

    Survivors keep their input order.
    """
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        groups[(d.image_id, d.class_id)].append(i)
    keep: set[int] = set()
    for idx in groups.values():
        order = sorted(idx, key=lambda i: (-dets[i].score, i))
        boxes = np.array([dets[i].box for i in order], np.float64)
        ious = iou_matrix(boxes, boxes)
        alive = np.ones(len(order), bool)
        for p in range(len(order)):
            if not alive[p]:
                continue
            keep.add(order[p])
            alive[p + 1:] &= ~(ious[p, p + 1:] > iou_thresh)
    return [d for i, d in enumerate(dets) if i in keep]


def _match(dets: Sequence, gts: Sequence[GroundTruth], thresh: float) -> list[bool]:
    """TP flags for ``dets`` (already sorted by score) against one class's GTs."""
    by_image: dict[int, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_image[g.image_id].append(j)
    used = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, -1.0
        for j in by_image.get(d.image_id, ()):
            if used[j]:
                continue
            v = iou(d.box, gts[j].box)
            if v >= thresh and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def ap_from_flags(tp_flags: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated area under the precision-recall curve."""
    if num_gt <= 0:
        raise InvalidArgument("AP needs at least one ground-truth box")
    if not len(tp_flags):
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    n = np.arange(1, len(tp) + 1)
    recall = tp / num_gt
    precision = tp / n
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = [float(envelope[i]) if i < len(envelope) else 0.0 for i in idx]
    return math.fsum(vals) / len(RECALL_POINTS)


def per_class_ap(dets: Sequence, gts: Sequence[GroundTruth], iou_thresh: float) -> dict[int, float]:
    """AP for every class that has at least one GT."""
    gt_by_class: dict[int, list[GroundTruth]] = defaultdict(list)
    for g in gts:
        gt_by_class[g.class_id].append(g)
    det_by_class: dict[int, list] = defaultdict(list)
    for d in dets:
        det_by_class[d.class_id].append(d)
    out = {}
    for c in sorted(gt_by_class):
        ds = det_by_class.get(c, [])
        ds = [ds[i] for i in _order([d.score for d in ds])]
        out[c] = ap_from_flags(_match(ds, gt_by_class[c], iou_thresh), len(gt_by_class[c]))
    return out


def average_precision(dets: Sequence, gts: Sequence[GroundTruth], iou_thresh: float = 0.5) -> float | None:
    """Class-averaged AP; ``None`` when there is no ground truth at all."""
    per = per_class_ap(dets, gts, iou_thresh)
    if not per:
        return None
    return math.fsum(per.values()) / len(per)


def ap_sweep(dets: Sequence, gts: Sequence[GroundTruth]) -> dict:
    """AP50, AP75 and AP averaged over IoU 0.50:0.05:0.95."""
    by_t = {t: average_precision(dets, gts, t) for t in IOU_THRESHOLDS}
    if by_t[0.5] is None:
        return {"AP": None, "AP50": None, "AP75": None}
    return {
        "AP": math.fsum(by_t.values()) / len(by_t),
        "AP50": by_t[0.5],
        "AP75": by_t[0.75],
    }


def gts_from_labels(labels_per_image: Iterable[Sequence], image_offset: int = 0) -> list[GroundTruth]:
    return [GroundTruth(i + image_offset, b.class_id, (b.cx, b.cy, b.w, b.h))
            for i, labels in enumerate(labels_per_image) for b in labels]


def heatmap_from_predictions(preds: Sequence, level, image_size: int | None = None,
                             index: int = 0) -> np.ndarray:
    """sigmoid(objectness) of one level, nearest-upsampled to input resolution."""
    from .detector import LEVEL_NAMES, STRIDES
    from .tensor import Tensor, sigmoid

    if isinstance(level, str):
        if level.upper() not in LEVEL_NAMES:
            raise InvalidArgument(f"unknown level {level!r}; expected one of {LEVEL_NAMES}")
        level = LEVEL_NAMES.index(level.upper())
    if not 0 <= level < len(preds):
        raise InvalidArgument(f"level index {level} out of range")
    p = preds[level]
    p = p.data if isinstance(p, Tensor) else np.asarray(p)
    obj = sigmoid(p[index, 4].astype(np.float64))
    stride = STRIDES[level]
    if image_size is not None and image_size != obj.shape[0] * stride:
        stride = image_size // obj.shape[0]
    return np.repeat(np.repeat(obj, stride, axis=0), stride, axis=1)


def summarize(report: Mapping) -> str:
    """Aligned text summary of an ``eval`` report."""
    def fmt(v):
        return "   n/a" if v is None else f"{v:6.4f}"

    lines = [f"{'metric':<10}{'value':>8}"]
    for k in ("AP", "AP50", "AP75"):
        lines.append(f"{k:<10}{fmt(report.get(k)):>8}")
    for c, v in sorted(report.get("per_class", {}).items(), key=lambda kv: int(kv[0])):
        lines.append(f"{'class ' + str(c):<10}{fmt(v):>8}")
    lines.append(f"{'images':<10}{report.get('num_images', 0):>8}")
    return "\n".join(lines)

"""Box geometry on (x, y, w, h) pixel boxes."""

from __future__ import annotations

import numpy as np


def iou(box_a, box_b) -> float:
    ax, ay, aw, ah = (float(c) for c in box_a)
    bx, by, bw, bh = (float(c) for c in box_b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between two (N, 4) and (M, 4) arrays of xywh boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax1[:, None], bx1[None]) - np.maximum(a[:, 0, None], b[None, :, 0])
    ih = np.minimum(ay1[:, None], by1[None]) - np.maximum(a[:, 1, None], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2], 0, None) * np.clip(a[:, 3], 0, None)
    area_b = np.clip(b[:, 2], 0, None) * np.clip(b[:, 3], 0, None)
    union = area_a[:, None] + area_b[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    out[(area_a[:, None] <= 0) | (area_b[None] <= 0)] = 0.0
    return out


def match_positive_proposals(proposals, gt_boxes, threshold: float = 0.5) -> list:
    """Best proposal per ground-truth box.

    Returns one ``(proposal_index, iou)`` per GT, or ``None`` where no
    proposal has IoU strictly above ``threshold``. Ties go to the lowest
    proposal index.
    """
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0:
        return [None] * len(gts)
    ious = iou_matrix(gts, proposals)
    matches = []
    for row in ious:
        j = int(np.argmax(row))  # first max -> lowest index
        matches.append((j, float(row[j])) if row[j] > threshold else None)
    return matches


def xywh_to_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]], axis=1)


def xyxy_to_xywh(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0], b[:, 1], b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], axis=1)


def nms(boxes, scores, iou_threshold: float = 0.5) -> list:
    """Greedy NMS; returns kept indices in descending score order (stable on ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = list(np.argsort(-scores, kind="stable"))
    ious = iou_matrix(boxes, boxes)
    keep = []
    while order:
        i = order.pop(0)
        keep.append(int(i))
        order = [j for j in order if ious[i, j] <= iou_threshold]
    return keep

"""Axis-aligned box arithmetic on continuous coordinates.

Boxes are ``(x1, y1, x2, y2)`` with ``x2 > x1`` and ``y2 > y1``. Areas use
``(x2 - x1) * (y2 - y1)`` with no pixel ``+1`` convention. Collections of
boxes are ``(N, 4)`` float64 arrays.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class BBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def make_box(x1: float, y1: float, x2: float, y2: float) -> BBox:
    """Build a validated box; degenerate or non-finite boxes raise ``ValueError``."""
    vals = (float(x1), float(y1), float(x2), float(y2))
    if not all(np.isfinite(vals)):
        raise ValueError(f"non-finite box {vals}")
    if not (vals[2] > vals[0] and vals[3] > vals[1]):
        raise ValueError(f"degenerate box {vals}: need x2 > x1 and y2 > y1")
    return BBox(*vals)


def as_boxes(boxes) -> np.ndarray:
    """Coerce to an ``(N, 4)`` float64 array and check every box is valid."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {arr.shape}")
    if arr.size and not (np.all(arr[:, 2] > arr[:, 0]) and np.all(arr[:, 3] > arr[:, 1])):
        raise ValueError("degenerate box in collection")
    return arr


def box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(boxes1), len(boxes2))``."""
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(boxes1[:, None, 2], boxes2[None, :, 2]) - np.maximum(boxes1[:, None, 0], boxes2[None, :, 0])
    ih = np.minimum(boxes1[:, None, 3], boxes2[None, :, 3]) - np.maximum(boxes1[:, None, 1], boxes2[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = box_area(boxes1)[:, None] + box_area(boxes2)[None, :] - inter
    out = inter / union
    # identical boxes must give exactly 1 regardless of rounding in the union
    same = np.all(boxes1[:, None, :] == boxes2[None, :, :], axis=2)
    out[same] = 1.0
    return out


def nms(boxes, scores, thresh: float, overlaps: np.ndarray | None = None) -> list[int]:
    """Greedy non-maximum suppression.

    A box is dropped iff its IoU with an already kept box exceeds ``thresh``.
    Kept indices come back in descending score order; equal scores are
    visited lower index first. ``overlaps`` may carry a precomputed pairwise
    IoU matrix for ``boxes``.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        return []
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    if overlaps is None:
        overlaps = iou_matrix(boxes, boxes)
    order = np.lexsort((np.arange(len(scores)), -scores))
    suppressed = np.zeros(len(scores), dtype=bool)
    keep: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > thresh
    return keep


def box_centers(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_deltas(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Fast R-CNN deltas ``(dx, dy, dw, dh)`` taking each proposal onto its target."""
    px, py, pw, ph = box_centers(np.asarray(proposals, dtype=np.float64))
    gx, gy, gw, gh = box_centers(np.asarray(targets, dtype=np.float64))
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=-1)


def decode_deltas(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_deltas`."""
    px, py, pw, ph = box_centers(np.asarray(proposals, dtype=np.float64))
    deltas = np.asarray(deltas, dtype=np.float64)
    cx = px + deltas[..., 0] * pw
    cy = py + deltas[..., 1] * ph
    w = pw * np.exp(deltas[..., 2])
    h = ph * np.exp(deltas[..., 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def clip_boxes(boxes: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return np.clip(boxes, lo, hi)

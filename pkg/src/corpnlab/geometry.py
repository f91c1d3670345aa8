"""Boxes, anchors, IOU, anchor labeling and greedy NMS.

Boxes are stored as ``(x1, y1, x2, y2)`` in continuous pixel coordinates.
Most functions accept either a :class:`Box` or an array-like of shape ``(4,)``;
the batched helpers work on ``(n, 4)`` float arrays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box {self!r}: need x1 <= x2 and y1 <= y2")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in a)
        return cls(x1, y1, x2, y2)


class AnchorLabel(enum.IntEnum):
    IGNORE = -1
    BACKGROUND = 0
    FOREGROUND = 1


def as_boxes(boxes) -> np.ndarray:
    """Coerce a Box, a sequence of Boxes or an array-like to an ``(n, 4)`` array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None, :]
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(float, copy=False)
    else:
        boxes = list(boxes)
        if not boxes:
            return np.zeros((0, 4))
        arr = np.array([b.as_array() if isinstance(b, Box) else b for b in boxes], dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected boxes of shape (n, 4), got {arr.shape}")
    return arr


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def pairwise_iou(a, b) -> np.ndarray:
    """IOU matrix of shape ``(len(a), len(b))``; zero-area pairs give 0."""
    a = as_boxes(a)
    b = as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a, b) -> float:
    """Intersection over union of two boxes."""
    return float(pairwise_iou(a, b)[0, 0])


def generate_anchors(grid_h: int, grid_w: int, stride: float,
                     scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """Tile anchors over a ``grid_h x grid_w`` grid of cells.

    Each anchor of scale ``s`` and ratio ``r`` (height / width) has area ``s**2``.
    Order is row-major over cells, then scale, then ratio.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid dimensions must be >= 1")
    if not len(scales) or not len(ratios):
        raise ValueError("scales and ratios must be nonempty")
    if min(scales) <= 0 or min(ratios) <= 0:
        raise ValueError("scales and ratios must be positive")

    shapes = []
    for s in scales:
        for r in ratios:
            w = s / np.sqrt(r)
            shapes.append((w, w * r))
    shapes = np.array(shapes)

    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    cx = (xs.ravel() + 0.5) * stride
    cy = (ys.ravel() + 0.5) * stride
    half_w = 0.5 * shapes[:, 0]
    half_h = 0.5 * shapes[:, 1]
    anchors = np.stack([
        cx[:, None] - half_w[None, :],
        cy[:, None] - half_h[None, :],
        cx[:, None] + half_w[None, :],
        cy[:, None] + half_h[None, :],
    ], axis=-1)
    return anchors.reshape(-1, 4)


def label_anchors(anchors, gt, fg_thresh: float = 0.7, bg_thresh: float = 0.3) -> np.ndarray:
    """Assign Foreground / Background / Ignore to every anchor.

    Returns an int array of :class:`AnchorLabel` values. An anchor is
    foreground when its best IOU reaches ``fg_thresh`` or when it is the
    (lowest-index) best anchor for some gt box with positive overlap.
    """
    if not (0 < bg_thresh < fg_thresh < 1):
        raise ValueError("need 0 < bg_thresh < fg_thresh < 1")
    anchors = as_boxes(anchors)
    gt = as_boxes(gt)
    labels = np.full(len(anchors), AnchorLabel.IGNORE, dtype=np.int8)
    if len(gt) == 0:
        labels[:] = AnchorLabel.BACKGROUND
        return labels
    overlaps = pairwise_iou(anchors, gt)
    best = overlaps.max(axis=1)
    labels[best <= bg_thresh] = AnchorLabel.BACKGROUND
    labels[best >= fg_thresh] = AnchorLabel.FOREGROUND
    best_anchor = overlaps.argmax(axis=0)
    has_overlap = overlaps[best_anchor, np.arange(len(gt))] > 0
    labels[best_anchor[has_overlap]] = AnchorLabel.FOREGROUND
    return labels


def nms(boxes, scores: Iterable[float], iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression.

    Kept indices come back in descending score order, ties resolved by the
    lower original index. A box is suppressed when its IOU with an already
    kept box is strictly greater than ``iou_thresh``.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=float)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must have the same length")
    if len(boxes) == 0:
        return []
    order = np.lexsort((np.arange(len(scores)), -scores))
    areas = box_area(boxes)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        ix1 = np.maximum(boxes[i, 0], boxes[rest, 0])
        iy1 = np.maximum(boxes[i, 1], boxes[rest, 1])
        ix2 = np.minimum(boxes[i, 2], boxes[rest, 2])
        iy2 = np.minimum(boxes[i, 3], boxes[rest, 3])
        inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
        union = areas[i] + areas[rest] - inter
        ov = np.zeros_like(inter)
        np.divide(inter, union, out=ov, where=union > 0)
        order = rest[ov <= iou_thresh]
    return keep

"""Bounding boxes, per-frame annotations and overlap primitives.

Coordinates are real-valued pixels in (x1, y1, x2, y2) order with the
half-open convention: area = (x2 - x1) * (y2 - y1), no "+1" correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DegenerateBoxError(ValueError):
    """Raised when a box would have zero or negative area."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise DegenerateBoxError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DegenerateBoxError(f"degenerate box {coords}")

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "BoundingBox":
        if len(coords) != 4:
            raise DegenerateBoxError(f"expected 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class Detection:
    """A scored, classed box on one frame of one video.

    ``score`` follows the SVM convention: unbounded, higher is more confident.
    """

    video_id: str
    frame: int
    class_id: int
    score: float
    box: BoundingBox


@dataclass(frozen=True)
class GroundTruthObject:
    video_id: str
    frame: int
    class_id: int
    instance_id: int
    box: BoundingBox


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) arrays.

    Uses the same floating-point operation order as :func:`iou`, so entries
    agree with the scalar version bit for bit.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=overlap)
    return out


def nms(dets: Sequence[Detection], overlap_thresh: float) -> list[Detection]:
    """Greedy non-maximum suppression over detections of one frame and class.

    Repeatedly keeps the highest-scoring remaining detection and drops every
    detection whose IoU with it is >= ``overlap_thresh``. Equal scores keep
    input order. The result is sorted by score, descending.
    """
    if not 0.0 <= overlap_thresh <= 1.0:
        raise ValueError(f"overlap_thresh must be in [0, 1], got {overlap_thresh}")
    if not dets:
        return []
    keys = {(d.video_id, d.frame, d.class_id) for d in dets}
    if len(keys) > 1:
        raise ValueError("nms expects detections from a single video, frame and class")

    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    overlaps = iou_matrix(boxes_to_array([d.box for d in dets]), boxes_to_array([d.box for d in dets]))
    suppressed = np.zeros(len(dets), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(dets[i])
        suppressed |= overlaps[i] >= overlap_thresh
    return keep


def clamp_box(box: BoundingBox, width: float, height: float) -> BoundingBox:
    """Clip a box to [0, width] x [0, height].

    Raises DegenerateBoxError if nothing of the box is left inside the frame.
    """
    if width <= 0 or height <= 0:
        raise ValueError("frame width and height must be positive")
    return BoundingBox(
        min(max(box.x1, 0.0), width),
        min(max(box.y1, 0.0), height),
        min(max(box.x2, 0.0), width),
        min(max(box.y2, 0.0), height),
    )

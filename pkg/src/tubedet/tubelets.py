"""Tubelet proposals: anchor selection, bidirectional tracking, suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional, Sequence

from .geometry import BoundingBox, Detection, iou

if TYPE_CHECKING:
    from .dataio import VideoMeta
    from .oracles import DetectorOracle, TrackerOracle


@dataclass
class TubeletBox:
    frame: int
    box: BoundingBox
    det_score: float
    track_score: float
    anchor_offset_norm: float = 0.0
    tcn_score: Optional[float] = None


@dataclass
class Tubelet:
    video_id: str
    class_id: int
    anchor_frame: int
    boxes: list[TubeletBox] = field(default_factory=list)
    # which perturbation scheme produced this tubelet, if any
    scheme: Optional[str] = None

    @property
    def start_frame(self) -> int:
        return self.boxes[0].frame

    @property
    def end_frame(self) -> int:
        return self.boxes[-1].frame

    def __len__(self) -> int:
        return len(self.boxes)

    def box_at(self, frame: int) -> TubeletBox:
        return self.boxes[frame - self.start_frame]

    @property
    def anchor(self) -> TubeletBox:
        return self.box_at(self.anchor_frame)

    def validate(self) -> None:
        if not self.boxes:
            raise ValueError("tubelet has no boxes")
        for i, tb in enumerate(self.boxes):
            if tb.frame != self.start_frame + i:
                raise ValueError("tubelet frames are not contiguous")
            if not 0.0 <= tb.track_score <= 1.0:
                raise ValueError(f"track_score {tb.track_score} outside [0, 1]")
            if not 0.0 <= tb.anchor_offset_norm <= 1.0:
                raise ValueError(f"anchor_offset_norm {tb.anchor_offset_norm} outside [0, 1]")
            if tb.tcn_score is not None and not 0.0 <= tb.tcn_score <= 1.0:
                raise ValueError(f"tcn_score {tb.tcn_score} outside [0, 1]")
        if not self.start_frame <= self.anchor_frame <= self.end_frame:
            raise ValueError("anchor frame outside the tubelet")


@dataclass(frozen=True)
class ProposalConfig:
    early_stop_conf: float = 0.1
    anchor_min_score: float = 0.0
    suppression_iou: float = 0.3
    max_anchors_per_class: int = 20

    def __post_init__(self):
        if not 0.0 <= self.early_stop_conf <= 1.0:
            raise ValueError("early_stop_conf must be in [0, 1]")
        if not 0.0 <= self.suppression_iou <= 1.0:
            raise ValueError("suppression_iou must be in [0, 1]")
        if self.max_anchors_per_class < 1:
            raise ValueError("max_anchors_per_class must be >= 1")


def anchor_offsets(tubelet: Tubelet) -> Tubelet:
    """Fill ``anchor_offset_norm`` with |frame - anchor_frame| / length, in place."""
    length = len(tubelet)
    for tb in tubelet.boxes:
        tb.anchor_offset_norm = abs(tb.frame - tubelet.anchor_frame) / length
    return tubelet


def _track_until_stop(tracker, video_id, class_id, anchor, direction, early_stop_conf):
    kept = []
    for frame, box, conf in tracker.track(video_id, class_id, anchor, direction):
        if conf < early_stop_conf:
            break
        kept.append((frame, box, conf))
    return kept


def propose_tubelets(
    video: "VideoMeta",
    class_id: int,
    scored_detections: Sequence[Detection],
    tracker: "TrackerOracle",
    cfg: ProposalConfig = ProposalConfig(),
    detector: Optional["DetectorOracle"] = None,
) -> list[Tubelet]:
    """Track high-confidence detections of one class into tubelets.

    Anchors are taken greedily by score; after each tubelet is built, every
    remaining detection overlapping one of its boxes on the same frame with
    IoU >= ``cfg.suppression_iou`` leaves the anchor pool.

    Tracked boxes carry NaN ``det_score`` unless a ``detector`` is given, in
    which case they are scored with it (the anchor keeps its own score).
    """
    for d in scored_detections:
        if d.class_id != class_id or d.video_id != video.video_id:
            raise ValueError("detections must all belong to the given video and class")

    # stable: equal scores keep input order
    pool = sorted(
        (d for d in scored_detections if d.score >= cfg.anchor_min_score),
        key=lambda d: -d.score,
    )
    boxes_by_frame: dict[int, list[BoundingBox]] = {}
    tubelets: list[Tubelet] = []

    while pool and len(tubelets) < cfg.max_anchors_per_class:
        anchor = pool.pop(0)
        backward = _track_until_stop(tracker, video.video_id, class_id, anchor, "backward", cfg.early_stop_conf)
        forward = _track_until_stop(tracker, video.video_id, class_id, anchor, "forward", cfg.early_stop_conf)

        boxes = [TubeletBox(f, b, math.nan, c) for f, b, c in reversed(backward)]
        boxes.append(TubeletBox(anchor.frame, anchor.box, anchor.score, 1.0))
        boxes.extend(TubeletBox(f, b, math.nan, c) for f, b, c in forward)
        tubelet = Tubelet(video.video_id, class_id, anchor.frame, boxes)
        if detector is not None:
            score_tubelet(tubelet, detector, keep_anchor_score=True)
        anchor_offsets(tubelet)
        tubelets.append(tubelet)

        for tb in boxes:
            boxes_by_frame.setdefault(tb.frame, []).append(tb.box)
        pool = [
            d for d in pool
            if all(iou(d.box, b) < cfg.suppression_iou for b in boxes_by_frame.get(d.frame, ()))
        ]
    return tubelets


def score_tubelet(tubelet: Tubelet, detector: "DetectorOracle", keep_anchor_score: bool = False) -> Tubelet:
    """Score every tubelet box with the still-image detector, in place."""
    by_frame = detector.score_boxes_many(
        tubelet.video_id, tubelet.class_id, [(tb.frame, tb.box) for tb in tubelet.boxes]
    )
    for tb, score in zip(tubelet.boxes, by_frame):
        if keep_anchor_score and tb.frame == tubelet.anchor_frame:
            continue
        tb.det_score = score
    return tubelet


def copy_tubelet(tubelet: Tubelet, **changes) -> Tubelet:
    out = replace(tubelet, boxes=[replace(tb) for tb in tubelet.boxes])
    return replace(out, **changes) if changes else out

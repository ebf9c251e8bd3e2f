"""Mean AP (VID protocol), CorLoc (YTO protocol) and score-stability diagnostics."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Detection, GroundTruthObject, boxes_to_array, iou_matrix
from .tubelets import Tubelet

INTERPOLATION = "all-points monotone envelope (VOC2010)"


class NoGroundTruth(ValueError):
    """AP or CorLoc requested for a class without any ground truth."""


def sort_detections(dets: Sequence[Detection]) -> list[int]:
    """Indices by score descending; ties by video id, frame, then input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].video_id, dets[i].frame, i))


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthObject],
                     iou_thresh: float = 0.5) -> tuple[list[int], np.ndarray]:
    """Greedy matching in score order.

    Returns the processing order and a boolean TP flag per position in that
    order. Each detection takes the still-unmatched same-frame ground truth
    with the highest IoU >= ``iou_thresh``; equal IoUs go to the earlier gt.
    """
    by_frame: dict[tuple[str, int], list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_frame[(g.video_id, g.frame)].append(j)
    gt_arrays = {k: boxes_to_array([gts[j].box for j in idx]) for k, idx in by_frame.items()}
    taken = np.zeros(len(gts), dtype=bool)

    order = sort_detections(dets)
    tp = np.zeros(len(order), dtype=bool)
    for pos, i in enumerate(order):
        d = dets[i]
        key = (d.video_id, d.frame)
        idx = by_frame.get(key)
        if not idx:
            continue
        overlaps = iou_matrix(boxes_to_array([d.box]), gt_arrays[key])[0]
        best, best_iou = -1, -1.0
        for local, j in enumerate(idx):
            if not taken[j] and overlaps[local] >= iou_thresh and overlaps[local] > best_iou:
                best, best_iou = j, overlaps[local]
        if best >= 0:
            taken[best] = True
            tp[pos] = True
    return order, tp


def pr_curve(dets: Sequence[Detection], gts: Sequence[GroundTruthObject],
             iou_thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each detection in score order."""
    if not gts:
        raise NoGroundTruth("no ground truth for this class")
    _, tp = match_detections(dets, gts, iou_thresh)
    ctp = np.cumsum(tp)
    n = np.arange(1, len(tp) + 1)
    return ctp / len(gts), ctp / np.maximum(n, 1)


def ap_from_curve(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruthObject],
                      iou_thresh: float = 0.5) -> float:
    """Area under the interpolated PR curve for detections and ground truth of one class."""
    recall, precision = pr_curve(dets, gts, iou_thresh)
    return ap_from_curve(recall, precision)


def corloc(dets: Sequence[Detection], gts: Sequence[GroundTruthObject], class_id: int,
           iou_thresh: float = 0.5) -> float:
    """Fraction of frames annotated with ``class_id`` whose top detection hits a gt (IoU > thresh)."""
    gt_frames: dict[tuple[str, int], list] = defaultdict(list)
    for g in gts:
        if g.class_id == class_id:
            gt_frames[(g.video_id, g.frame)].append(g.box)
    if not gt_frames:
        raise NoGroundTruth(f"no annotated frames for class {class_id}")
    top: dict[tuple[str, int], Detection] = {}
    for d in dets:
        if d.class_id != class_id:
            continue
        key = (d.video_id, d.frame)
        if key in gt_frames and (key not in top or d.score > top[key].score):
            top[key] = d
    hits = 0
    for key, boxes in gt_frames.items():
        d = top.get(key)
        if d is not None and iou_matrix(boxes_to_array([d.box]), boxes_to_array(boxes)).max() > iou_thresh:
            hits += 1
    return hits / len(gt_frames)


def temporal_variation(scores: Sequence[float]) -> float:
    """Mean absolute first difference of a score sequence."""
    s = np.asarray(scores, dtype=np.float64)
    if len(s) < 2:
        raise ValueError("temporal variation needs at least two scores")
    return float(np.abs(np.diff(s)).mean())


# -- reports -----------------------------------------------------------------

@dataclass
class ClassResult:
    class_id: int
    name: str
    ap: Optional[float]
    corloc: Optional[float]
    tp: int
    fp: int
    n_gt: int
    temporal_variation: Optional[float] = None


@dataclass
class EvalReport:
    method: str
    classes: list[ClassResult] = field(default_factory=list)
    interpolation: str = INTERPOLATION

    @property
    def mean_ap(self) -> float:
        aps = [c.ap for c in self.classes if c.ap is not None]
        if not aps:
            raise NoGroundTruth("no class has ground truth")
        return float(np.mean(aps))

    @property
    def mean_corloc(self) -> Optional[float]:
        vals = [c.corloc for c in self.classes if c.corloc is not None]
        return float(np.mean(vals)) if vals else None

    def by_name(self) -> dict[str, ClassResult]:
        return {c.name: c for c in self.classes}

    def records(self) -> list[dict]:
        out = []
        for c in self.classes:
            out.append({
                "type": "class", "method": self.method, "class": c.name, "ap": c.ap, "corloc": c.corloc,
                "tp": c.tp, "fp": c.fp, "gt": c.n_gt, "temporal_variation": c.temporal_variation,
            })
        out.append({
            "type": "summary", "method": self.method, "mean_ap": self.mean_ap,
            "mean_corloc": self.mean_corloc, "interpolation": self.interpolation,
        })
        return out


def tubelet_detections(tubelets: Iterable[Tubelet], score: str = "det",
                       fuse: bool = False) -> list[Detection]:
    """Flatten tubelets to per-frame detections scored by ``det`` or ``tcn`` score.

    ``fuse`` multiplies the TCN probability by the logistic of the detector
    score (an optional extension; the default evaluates the TCN score alone).
    """
    out = []
    for t in tubelets:
        for tb in t.boxes:
            if score == "det":
                s = tb.det_score
            elif score == "tcn":
                if tb.tcn_score is None:
                    raise ValueError("tubelet has not been re-scored")
                s = tb.tcn_score
                if fuse:
                    s = s / (1.0 + math.exp(-tb.det_score))
            else:
                raise ValueError("score must be 'det' or 'tcn'")
            out.append(Detection(t.video_id, tb.frame, t.class_id, s, tb.box))
    return out


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruthObject], class_names: Sequence[str],
             method: str = "detections", iou_thresh: float = 0.5, with_corloc: bool = True,
             tubelets: Optional[Sequence[Tubelet]] = None, score: str = "det") -> EvalReport:
    """Per-class AP, CorLoc and counts; optionally mean temporal variation of tubelet scores."""
    det_by_class: dict[int, list[Detection]] = defaultdict(list)
    gt_by_class: dict[int, list[GroundTruthObject]] = defaultdict(list)
    for d in dets:
        det_by_class[d.class_id].append(d)
    for g in gts:
        gt_by_class[g.class_id].append(g)

    tv_by_class: dict[int, list[float]] = defaultdict(list)
    for t in tubelets or ():
        if len(t) >= 2:
            seq = [tb.det_score if score == "det" else tb.tcn_score for tb in t.boxes]
            tv_by_class[t.class_id].append(temporal_variation(seq))

    report = EvalReport(method)
    for c, name in enumerate(class_names):
        cdets, cgts = det_by_class.get(c, []), gt_by_class.get(c, [])
        if cgts:
            order, tp = match_detections(cdets, cgts, iou_thresh)
            ctp = np.cumsum(tp)
            recall = ctp / len(cgts)
            precision = ctp / np.arange(1, len(tp) + 1)
            ap = ap_from_curve(recall, precision)
            ntp = int(tp.sum())
            cl = corloc(cdets, cgts, c, iou_thresh) if with_corloc else None
        else:
            ap, cl, ntp = None, None, 0
        tv = float(np.mean(tv_by_class[c])) if tv_by_class.get(c) else None
        report.classes.append(ClassResult(c, name, ap, cl, ntp, len(cdets) - ntp, len(cgts), tv))
    if all(c.ap is None for c in report.classes):
        raise NoGroundTruth("no class has ground truth")
    return report


def mean_ap(dets: Sequence[Detection], gts: Sequence[GroundTruthObject], class_names: Sequence[str],
            iou_thresh: float = 0.5) -> EvalReport:
    return evaluate(dets, gts, class_names, "detections", iou_thresh, with_corloc=False)


def _fmt(v, digits=4):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def report_rows(reports: Sequence[EvalReport]) -> tuple[list[str], list[list[str]]]:
    """Header and rows of the ablation table: one row per method, AP per class then means."""
    names = [c.name for c in reports[0].classes]
    header = ["method", *names, "mean_ap", "mean_corloc"]
    rows = []
    for r in reports:
        byn = r.by_name()
        rows.append([r.method, *(_fmt(byn[n].ap) for n in names), _fmt(r.mean_ap), _fmt(r.mean_corloc)])
    return header, rows


def format_table(reports: Sequence[EvalReport], iou_thresh: float = 0.5) -> str:
    """Aligned plain-text table, one row per method."""
    header, rows = report_rows(reports)
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    lines = [f"# AP interpolation: {reports[0].interpolation}; IoU threshold {iou_thresh:g}"]
    for row in [header, *rows]:
        lines.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def format_tsv(reports: Sequence[EvalReport]) -> str:
    header, rows = report_rows(reports)
    return "\n".join("\t".join(r) for r in [header, *rows]) + "\n"

"""Tubelet box perturbation and spatial max-pooling.

Two candidate generators feed the pooling step:

``R(n, r)``  n boxes whose corners are jittered by U(-r*w, r*w) horizontally and
             U(-r*h, r*h) vertically, each corner coordinate drawn independently.
``O(t)``     the frame's original detections overlapping the tubelet box with
             IoU >= t.

Every candidate and the original box are scored by the detector; the
best-scoring one replaces the tubelet box.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .dataio import VideoMeta
from .geometry import BoundingBox, Detection, boxes_to_array, iou_matrix
from .oracles import DetectorOracle, stable_seed
from .tubelets import Tubelet, copy_tubelet

MAX_RETRIES = 10


@dataclass(frozen=True)
class RandomScheme:
    n: int = 20
    r: float = 0.2

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("R(n, r) needs n >= 1")
        if self.r < 0:
            raise ValueError("R(n, r) needs r >= 0")

    def __str__(self):
        return f"R({self.n},{self.r:g})"


@dataclass(frozen=True)
class OriginalScheme:
    t: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("O(t) needs 0 <= t <= 1")

    def __str__(self):
        return f"O({self.t:g})"


Scheme = Union[RandomScheme, OriginalScheme]

_SCHEME_RE = re.compile(r"^\s*([RO])\s*\(\s*([^,()]+?)\s*(?:,\s*([^,()]+?)\s*)?\)\s*$", re.I)


def parse_scheme(text: str) -> Scheme:
    """Parse ``"R(20,0.2)"`` or ``"O(0.5)"``."""
    m = _SCHEME_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse perturbation scheme {text!r}")
    kind, first, second = m.group(1).upper(), m.group(2), m.group(3)
    if kind == "R":
        if second is None:
            raise ValueError(f"R scheme needs two arguments: {text!r}")
        return RandomScheme(int(first), float(second))
    if second is not None:
        raise ValueError(f"O scheme takes one argument: {text!r}")
    return OriginalScheme(float(first))


@dataclass(frozen=True)
class PerturbConfig:
    schemes: tuple = (RandomScheme(20, 0.2), OriginalScheme(0.5))
    seed: int = 0
    # "tubelets": one pooled copy per scheme (tubelet count multiplies);
    # "candidates": one pooled copy over the union of all schemes' candidates
    combine: str = "tubelets"

    def __post_init__(self):
        if not self.schemes:
            raise ValueError("at least one perturbation scheme is required")
        if self.combine not in ("tubelets", "candidates"):
            raise ValueError("combine must be 'tubelets' or 'candidates'")

    @property
    def combined_name(self) -> str:
        return "+".join(str(s) for s in self.schemes)

    def rescoring_input(self, pooled: Iterable[Tubelet]) -> list[Tubelet]:
        """The pooled tubelets that stand for the combined schemes."""
        if self.combine == "candidates" and len(self.schemes) > 1:
            return [t for t in pooled if t.scheme == self.combined_name]
        return list(pooled)


def perturb_offsets(rng: np.random.Generator, w: float, h: float, r: float, n: int) -> np.ndarray:
    """(n, 4) corner offsets (dx1, dy1, dx2, dy2), four independent uniform draws per row."""
    lo = np.array([-r * w, -r * h, -r * w, -r * h])
    return rng.uniform(lo, -lo, size=(n, 4))


def random_perturb(box: BoundingBox, r: float, n: int, width: float, height: float,
                   rng: np.random.Generator) -> list[BoundingBox]:
    """n randomly perturbed copies of ``box`` clamped to the frame.

    Samples that degenerate after clamping are redrawn up to 10 times and
    dropped if they never succeed, so fewer than n boxes may come back.
    """
    if r < 0 or n < 1:
        raise ValueError("need r >= 0 and n >= 1")
    base = np.array([box.x1, box.y1, box.x2, box.y2])
    limit = np.array([width, height, width, height])
    out = np.clip(base + perturb_offsets(rng, box.width, box.height, r, n), 0.0, limit)
    bad = (out[:, 0] >= out[:, 2]) | (out[:, 1] >= out[:, 3])
    for _ in range(MAX_RETRIES):
        if not bad.any():
            break
        idx = np.flatnonzero(bad)
        redraw = np.clip(base + perturb_offsets(rng, box.width, box.height, r, len(idx)), 0.0, limit)
        out[idx] = redraw
        bad[idx] = (redraw[:, 0] >= redraw[:, 2]) | (redraw[:, 1] >= redraw[:, 3])
    return [BoundingBox(*map(float, row)) for row in out[~bad]]


def original_replacement_candidates(tubelet_box: BoundingBox, frame_detections: Sequence[Detection],
                                    t: float) -> list[BoundingBox]:
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must be in [0, 1]")
    if not frame_detections:
        return []
    boxes = [d.box for d in frame_detections]
    ious = iou_matrix(boxes_to_array([tubelet_box]), boxes_to_array(boxes))[0]
    return [b for b, o in zip(boxes, ious) if o >= t]


def max_pool(tubelet: Tubelet, candidates: Sequence[Sequence[BoundingBox]],
             oracle: DetectorOracle) -> Tubelet:
    """Replace each tubelet box by its best-scoring candidate.

    ``candidates[i]`` are the extra boxes for the i-th tubelet box; the
    original box is always prepended, so it wins ties. Returns a new tubelet;
    track scores and anchor offsets are untouched.
    """
    if len(candidates) != len(tubelet.boxes):
        raise ValueError("need one candidate list per tubelet box")
    out = copy_tubelet(tubelet)
    for tb, extra in zip(out.boxes, candidates):
        pool = [tb.box, *extra]
        scores = oracle.score_boxes(tubelet.video_id, tb.frame, tubelet.class_id, pool)
        best = int(np.argmax(scores))  # first maximum
        tb.box, tb.det_score = pool[best], float(scores[best])
    return out


def _tubelet_rng(seed: int, tubelet: Tubelet, frame: int) -> np.random.Generator:
    anchor = tubelet.anchor.box
    return np.random.default_rng(stable_seed(
        seed, tubelet.video_id, tubelet.class_id, tubelet.anchor_frame,
        anchor.x1, anchor.y1, anchor.x2, anchor.y2, frame,
    ))


def scheme_candidates(tubelet: Tubelet, schemes: Sequence[Scheme], video: VideoMeta,
                      frame_detections: Mapping[int, Sequence[Detection]], seed: int) -> list[list[BoundingBox]]:
    """Candidate boxes for every tubelet box under the union of ``schemes``."""
    out = []
    for tb in tubelet.boxes:
        rng = None
        cands: list[BoundingBox] = []
        for scheme in schemes:
            if isinstance(scheme, RandomScheme):
                if rng is None:
                    rng = _tubelet_rng(seed, tubelet, tb.frame)
                cands.extend(random_perturb(tb.box, scheme.r, scheme.n, video.width, video.height, rng))
            else:
                cands.extend(original_replacement_candidates(tb.box, frame_detections.get(tb.frame, ()), scheme.t))
        out.append(cands)
    return out


def perturb_and_pool(tubelets: Iterable[Tubelet], cfg: PerturbConfig, videos: Mapping[str, VideoMeta],
                     detections: Iterable[Detection], oracle: DetectorOracle) -> list[Tubelet]:
    """Apply the configured schemes to every tubelet.

    Each scheme yields its own pooled copy, tagged with the scheme name and
    grouped per input tubelet in scheme order. In "candidates" mode with more
    than one scheme a further copy pooled over all schemes' candidates follows,
    tagged with the joined name (see ``PerturbConfig.rescoring_input``).
    """
    by_key: dict[tuple[str, int], dict[int, list[Detection]]] = {}
    for d in detections:
        by_key.setdefault((d.video_id, d.class_id), {}).setdefault(d.frame, []).append(d)

    out = []
    for t in tubelets:
        frame_dets = by_key.get((t.video_id, t.class_id), {})
        video = videos[t.video_id]
        for scheme in cfg.schemes:
            pooled = max_pool(t, scheme_candidates(t, [scheme], video, frame_dets, cfg.seed), oracle)
            pooled.scheme = str(scheme)
            out.append(pooled)
        if cfg.combine == "candidates" and len(cfg.schemes) > 1:
            pooled = max_pool(t, scheme_candidates(t, cfg.schemes, video, frame_dets, cfg.seed), oracle)
            pooled.scheme = cfg.combined_name
            out.append(pooled)
    return out

"""Detector and tracker oracles, proposal filtering, and the synthetic world.

Real CNN detectors and trackers are replaced by two small interfaces. File
backed implementations replay stored detections; synthetic ones derive
scores and tracks from simulated ground truth so every pipeline stage can be
checked exactly at desk scale.
"""

from __future__ import annotations

import configparser
import hashlib
import math
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .dataio import (
    DatasetManifest,
    VideoMeta,
    write_ground_truth,
    write_manifest,
    write_proposals,
)
from .geometry import (
    BoundingBox,
    DegenerateBoxError,
    Detection,
    GroundTruthObject,
    boxes_to_array,
    clamp_box,
    iou,
    iou_matrix,
)

# ImageNet VID class names; synthetic worlds use a prefix of this list.
VID_CLASSES = [
    "airplane", "antelope", "bear", "bicycle", "bird", "bus", "car", "cattle",
    "dog", "domestic_cat", "elephant", "fox", "giant_panda", "hamster", "horse",
    "lion", "lizard", "monkey", "motorcycle", "rabbit", "red_panda", "sheep",
    "snake", "squirrel", "tiger", "train", "turtle", "watercraft", "whale", "zebra",
]


def _canonical(parts) -> bytes:
    """Hash input that does not depend on whether a number is a numpy or Python scalar."""
    def plain(x):
        if isinstance(x, np.generic):
            return x.item()
        if isinstance(x, (list, tuple)):
            return tuple(plain(v) for v in x)
        return x
    return repr(plain(parts)).encode("utf-8")


def stable_seed(*parts) -> int:
    """64-bit seed from a tuple of ints/floats/strings, independent of PYTHONHASHSEED."""
    h = hashlib.blake2b(_canonical(parts), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _hash_normal(*parts) -> float:
    """Standard normal deviate derived from a stable hash (Box-Muller)."""
    digest = hashlib.blake2b(_canonical(parts), digest_size=16).digest()
    a, b = struct.unpack("<QQ", digest)
    u1 = ((a >> 11) + 1) / 9007199254740993.0  # (0, 1]
    u2 = (b >> 11) / 9007199254740992.0
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


# -- interfaces --------------------------------------------------------------

class DetectorOracle:
    """Scores boxes for one class on one frame; one real score per box."""

    def score_boxes(self, video_id: str, frame: int, class_id: int,
                    boxes: Sequence[BoundingBox]) -> list[float]:
        raise NotImplementedError

    def score_boxes_many(self, video_id: str, class_id: int,
                         items: Sequence[tuple[int, BoundingBox]]) -> list[float]:
        by_frame: dict[int, list[int]] = defaultdict(list)
        for i, (frame, _) in enumerate(items):
            by_frame[frame].append(i)
        out = [0.0] * len(items)
        for frame, idx in by_frame.items():
            scores = self.score_boxes(video_id, frame, class_id, [items[i][1] for i in idx])
            for i, s in zip(idx, scores):
                out[i] = s
        return out


class TrackerOracle:
    """Tracks an anchor detection frame by frame towards a video boundary.

    ``track`` yields ``(frame, box, confidence)`` starting at the frame next to
    the anchor; frames are strictly monotone in ``direction`` and confidence is
    in [0, 1]. Callers apply their own early stopping.
    """

    def track(self, video_id: str, class_id: int, anchor: Detection,
              direction: str) -> Iterator[tuple[int, BoundingBox, float]]:
        raise NotImplementedError


def _frame_range(anchor_frame: int, frame_count: int, direction: str) -> range:
    if direction == "forward":
        return range(anchor_frame + 1, frame_count)
    if direction == "backward":
        return range(anchor_frame - 1, -1, -1)
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


# -- detectors ---------------------------------------------------------------

def synthetic_detector_score(box: BoundingBox, frame_gt: Sequence[BoundingBox], a: float, b: float,
                             sigma_det: float, rng: Optional[np.random.Generator] = None) -> float:
    """a * max IoU(box, gt) + b + N(0, sigma_det); the max over no boxes is 0."""
    if a <= 0:
        raise ValueError("slope a must be positive")
    best = max((iou(box, g) for g in frame_gt), default=0.0)
    noise = 0.0
    if sigma_det > 0:
        if rng is None:
            raise ValueError("an rng is required when sigma_det > 0")
        noise = sigma_det * rng.standard_normal()
    return a * best + b + noise


class SyntheticDetector(DetectorOracle):
    """Class-specific detector whose score rises linearly with ground-truth overlap.

    Noise is keyed on (seed, video, frame, class, box) so that any box scores
    the same whenever and in whatever order it is queried.
    """

    def __init__(self, ground_truth: Iterable[GroundTruthObject], a: float = 3.0, b: float = -2.25,
                 sigma_det: float = 0.2, seed: int = 0):
        if a <= 0:
            raise ValueError("slope a must be positive")
        self.a, self.b, self.sigma_det, self.seed = a, b, sigma_det, seed
        grouped: dict[tuple[str, int, int], list[BoundingBox]] = defaultdict(list)
        for g in ground_truth:
            grouped[(g.video_id, g.frame, g.class_id)].append(g.box)
        self._gt = {k: boxes_to_array(v) for k, v in grouped.items()}

    def noise(self, video_id, frame, class_id, box: BoundingBox) -> float:
        if self.sigma_det == 0:
            return 0.0
        return self.sigma_det * _hash_normal(self.seed, video_id, frame, class_id,
                                             box.x1, box.y1, box.x2, box.y2)

    def score_boxes(self, video_id, frame, class_id, boxes):
        if not boxes:
            return []
        gt = self._gt.get((video_id, frame, class_id))
        if gt is None:
            best = np.zeros(len(boxes))
        else:
            best = iou_matrix(boxes_to_array(boxes), gt).max(axis=1)
        return [self.a * float(m) + self.b + self.noise(video_id, frame, class_id, bx)
                for m, bx in zip(best, boxes)]


class FileDetector(DetectorOracle):
    """Replays stored detections.

    A query box gets the stored score of an exact coordinate match; failing
    that, the score of the stored detection with the highest IoU provided it
    is >= ``fallback_iou``; otherwise -inf.
    """

    def __init__(self, detections: Iterable[Detection], fallback_iou: float = 0.9):
        self.fallback_iou = fallback_iou
        self._exact: dict[tuple, float] = {}
        grouped: dict[tuple[str, int, int], list[Detection]] = defaultdict(list)
        for d in detections:
            key = (d.video_id, d.frame, d.class_id, d.box.x1, d.box.y1, d.box.x2, d.box.y2)
            # first stored record wins on exact duplicates
            self._exact.setdefault(key, d.score)
            grouped[(d.video_id, d.frame, d.class_id)].append(d)
        self._arrays = {
            k: (boxes_to_array([d.box for d in v]), np.array([d.score for d in v]))
            for k, v in grouped.items()
        }

    def score_boxes(self, video_id, frame, class_id, boxes):
        stored = self._arrays.get((video_id, frame, class_id))
        out = []
        for bx in boxes:
            exact = self._exact.get((video_id, frame, class_id, bx.x1, bx.y1, bx.x2, bx.y2))
            if exact is not None:
                out.append(exact)
                continue
            if stored is None:
                out.append(-math.inf)
                continue
            ious = iou_matrix(boxes_to_array([bx]), stored[0])[0]
            j = int(np.argmax(ious))
            out.append(float(stored[1][j]) if ious[j] >= self.fallback_iou else -math.inf)
        return out


def filter_proposals(frame_proposals: Sequence[BoundingBox], oracle: DetectorOracle,
                     video_id: str, frame: int, classes: Iterable[int],
                     threshold: float = -1.1) -> list[BoundingBox]:
    """Keep proposals whose best score over all classes is >= threshold, in order."""
    if not frame_proposals:
        return []
    best = np.full(len(frame_proposals), -np.inf)
    for c in classes:
        best = np.maximum(best, oracle.score_boxes(video_id, frame, c, list(frame_proposals)))
    return [b for b, s in zip(frame_proposals, best) if s >= threshold]


# -- trackers ----------------------------------------------------------------

class IouChainTracker(TrackerOracle):
    """Links the previous box to the best-overlapping proposal of the next frame.

    Confidence is that IoU. When no proposal overlaps at all, the previous
    box is carried over with confidence 0.
    """

    def __init__(self, proposals: Mapping[tuple[str, int], Sequence[BoundingBox]],
                 videos: Iterable[VideoMeta]):
        self.videos = {v.video_id: v for v in videos}
        self._arrays = {k: (list(v), boxes_to_array(v)) for k, v in proposals.items()}

    def track(self, video_id, class_id, anchor, direction):
        prev = anchor.box
        for frame in _frame_range(anchor.frame, self.videos[video_id].frame_count, direction):
            cands = self._arrays.get((video_id, frame))
            conf = 0.0
            if cands is not None and cands[0]:
                ious = iou_matrix(boxes_to_array([prev]), cands[1])[0]
                j = int(np.argmax(ious))
                if ious[j] > 0.0:
                    prev, conf = cands[0][j], float(ious[j])
            yield frame, prev, conf


class GtFollowTracker(TrackerOracle):
    """Simulation-only tracker that follows the ground-truth instance of the anchor.

    The returned box is the true box shifted by ``drift`` pixels per frame of
    distance from the anchor, along a seeded random direction fixed per track.
    ``jitter`` adds independent per-frame corner noise with standard deviation
    ``jitter`` times the box width/height. ``scale_error`` gives each track a
    constant log-normal scale misfit, the same factor for width and height (a
    tracker locked onto the object at a slightly wrong scale), applied about
    the box centre. Confidence is
    ``max(0, 1 - conf_decay * k)`` at offset k. Tracking ends with confidence 0
    when the instance leaves the video or the drifted box leaves the frame.
    """

    def __init__(self, ground_truth: Iterable[GroundTruthObject], videos: Iterable[VideoMeta],
                 drift: float = 0.0, conf_decay: float = 0.0, seed: int = 0, jitter: float = 0.0,
                 scale_error: float = 0.0):
        self.videos = {v.video_id: v for v in videos}
        self.drift, self.conf_decay, self.seed, self.jitter, self.scale_error = (
            drift, conf_decay, seed, jitter, scale_error)
        self._by_frame: dict[tuple[str, int], list[GroundTruthObject]] = defaultdict(list)
        self._traj: dict[tuple[str, int], dict[int, BoundingBox]] = defaultdict(dict)
        for g in ground_truth:
            self._by_frame[(g.video_id, g.frame)].append(g)
            self._traj[(g.video_id, g.instance_id)][g.frame] = g.box

    def match_instance(self, video_id: str, class_id: int, anchor: Detection) -> Optional[int]:
        objs = self._by_frame.get((video_id, anchor.frame), [])
        same = [g for g in objs if g.class_id == class_id] or objs
        if not same:
            return None
        overlaps = [iou(anchor.box, g.box) for g in same]
        best = max(range(len(same)), key=lambda i: overlaps[i])
        if overlaps[best] > 0.0:
            return same[best].instance_id
        cx = (anchor.box.x1 + anchor.box.x2) / 2
        cy = (anchor.box.y1 + anchor.box.y2) / 2

        def dist(g):
            return math.hypot((g.box.x1 + g.box.x2) / 2 - cx, (g.box.y1 + g.box.y2) / 2 - cy)
        return min(same, key=dist).instance_id

    def track(self, video_id, class_id, anchor, direction):
        video = self.videos[video_id]
        frames = _frame_range(anchor.frame, video.frame_count, direction)
        instance = self.match_instance(video_id, class_id, anchor)
        if instance is None:
            for frame in frames:
                yield frame, anchor.box, 0.0
                break
            return
        traj = self._traj[(video_id, instance)]
        track_seed = stable_seed(self.seed, video_id, class_id, anchor.frame, direction, anchor.box.to_list())
        theta = 2 * math.pi * (track_seed / 2.0**64)
        ux, uy = math.cos(theta), math.sin(theta)
        rng = np.random.default_rng(track_seed)
        # one isotropic misfit per anchor, shared by both directions
        scale = math.exp(np.random.default_rng(stable_seed(self.seed, video_id, class_id, anchor.frame,
                                                           anchor.box.to_list())).normal(0.0, self.scale_error))
        last = anchor.box
        for k, frame in enumerate(frames, 1):
            true_box = traj.get(frame)
            if true_box is None:
                yield frame, last, 0.0
                return
            shift = self.drift * k
            box = true_box.shifted(shift * ux, shift * uy)
            try:
                if self.scale_error > 0:
                    cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
                    hw, hh = scale * box.width / 2, scale * box.height / 2
                    box = BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh)
                if self.jitter > 0:
                    n = rng.normal(0.0, self.jitter, size=4)
                    w, h = box.width, box.height
                    box = BoundingBox(box.x1 + n[0] * w, box.y1 + n[1] * h, box.x2 + n[2] * w, box.y2 + n[3] * h)
                last = clamp_box(box, video.width, video.height)
            except DegenerateBoxError:
                yield frame, last, 0.0
                return
            yield frame, last, max(0.0, 1.0 - self.conf_decay * k)


# -- synthetic world ---------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    videos: int = 8
    frames: int = 60
    classes: int = 3
    instances_per_video: int = 2
    sigma_det: float = 0.2
    a: float = 3.0
    b: float = -2.25
    proposals_per_frame: int = 30
    jitter: float = 0.15
    drift: float = 1.0
    conf_decay: float = 0.01
    # keys below extend the documented set
    track_jitter: float = 0.0
    track_scale_error: float = 0.5
    width: float = 320.0
    height: float = 240.0
    min_size: float = 40.0
    max_size: float = 100.0
    max_speed: float = 2.0
    size_drift: float = 0.005
    train_fraction: float = 0.5

    def validate(self) -> None:
        if self.videos < 1 or self.frames < 1:
            raise ValueError("simulation needs at least one video and one frame")
        if self.instances_per_video < 1:
            raise ValueError("simulation needs at least one instance per video")
        if not 1 <= self.classes <= len(VID_CLASSES):
            raise ValueError(f"classes must be in [1, {len(VID_CLASSES)}]")
        if self.a <= 0:
            raise ValueError("detector slope a must be positive")
        if min(self.sigma_det, self.jitter, self.drift, self.conf_decay, self.track_jitter,
               self.track_scale_error) < 0:
            raise ValueError("noise, jitter, drift and decay must be non-negative")
        if not 0 < self.min_size <= self.max_size <= min(self.width, self.height):
            raise ValueError("need 0 < min_size <= max_size <= frame size")
        if self.proposals_per_frame < 0:
            raise ValueError("proposals_per_frame must be non-negative")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in [0, 1]")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "SimConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown simulation key '{key}'")
            kwargs[key] = int(raw) if types[key] in ("int", int) else float(raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_ini(cls, path, section: str = "simulate") -> "SimConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        return cls.from_mapping(dict(parser[section]) if parser.has_section(section) else {})

    def to_dict(self) -> dict:
        return asdict(self)


def _trajectory(rng: np.random.Generator, cfg: SimConfig) -> list[BoundingBox]:
    w = rng.uniform(cfg.min_size, cfg.max_size)
    h = min(w * rng.uniform(0.6, 1.4), cfg.height * 0.9, cfg.max_size * 1.4)
    cx = rng.uniform(w / 2, cfg.width - w / 2)
    cy = rng.uniform(h / 2, cfg.height - h / 2)
    vx, vy = rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)
    growth = rng.uniform(-cfg.size_drift, cfg.size_drift)
    lo = cfg.min_size / 2
    out = []
    for _ in range(cfg.frames):
        x1 = max(0.0, round(cx - w / 2, 2))
        y1 = max(0.0, round(cy - h / 2, 2))
        x2 = min(cfg.width, round(cx + w / 2, 2))
        y2 = min(cfg.height, round(cy + h / 2, 2))
        out.append(BoundingBox(x1, y1, x2, y2))
        w = min(max(w * (1 + growth), lo), cfg.width * 0.9)
        h = min(max(h * (1 + growth), lo), cfg.height * 0.9)
        cx += vx
        cy += vy
        if cx - w / 2 < 0:
            cx, vx = w / 2, abs(vx)
        elif cx + w / 2 > cfg.width:
            cx, vx = cfg.width - w / 2, -abs(vx)
        if cy - h / 2 < 0:
            cy, vy = h / 2, abs(vy)
        elif cy + h / 2 > cfg.height:
            cy, vy = cfg.height - h / 2, -abs(vy)
    return out


def _jittered(rng, box: BoundingBox, scale: float, width: float, height: float,
              tries: int = 10) -> Optional[BoundingBox]:
    for _ in range(tries):
        dx = rng.normal(0.0, scale * box.width, size=2)
        dy = rng.normal(0.0, scale * box.height, size=2)
        try:
            return clamp_box(
                BoundingBox(round(box.x1 + dx[0], 2), round(box.y1 + dy[0], 2),
                            round(box.x2 + dx[1], 2), round(box.y2 + dy[1], 2)),
                width, height)
        except DegenerateBoxError:
            continue
    return None


def _background(rng, cfg: SimConfig) -> BoundingBox:
    w = rng.uniform(cfg.min_size / 2, cfg.max_size)
    h = rng.uniform(cfg.min_size / 2, cfg.max_size)
    x1 = rng.uniform(0, cfg.width - w)
    y1 = rng.uniform(0, cfg.height - h)
    return BoundingBox(round(x1, 2), round(y1, 2), round(x1 + w, 2), round(y1 + h, 2))


@dataclass
class SyntheticWorld:
    config: SimConfig
    class_names: list[str]
    videos: list[VideoMeta]
    ground_truth: list[GroundTruthObject]
    proposals: dict[tuple[str, int], list[BoundingBox]]

    def detector(self) -> SyntheticDetector:
        c = self.config
        return SyntheticDetector(self.ground_truth, c.a, c.b, c.sigma_det, c.seed)

    def gt_tracker(self) -> GtFollowTracker:
        c = self.config
        return GtFollowTracker(self.ground_truth, self.videos, c.drift, c.conf_decay, c.seed, c.track_jitter, c.track_scale_error)


def simulate_world(cfg: SimConfig) -> SyntheticWorld:
    """Generate videos, trajectories and per-frame proposals, deterministic per seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_train = int(round(cfg.videos * cfg.train_fraction))
    videos, gt = [], []
    proposals: dict[tuple[str, int], list[BoundingBox]] = {}
    # classes are dealt round-robin from a random start within each split, so
    # every class gets (nearly) the same number of instances on both sides
    offsets = [int(o) for o in rng.integers(cfg.classes, size=2)]
    instance_id = 0
    for v in range(cfg.videos):
        vid = f"vid_{v:03d}"
        split = 0 if v < n_train else 1
        videos.append(VideoMeta(vid, cfg.frames, cfg.width, cfg.height, "train" if split == 0 else "test"))
        tracks = []
        for k in range(cfg.instances_per_video):
            dealt = (v - split * n_train) * cfg.instances_per_video + k
            class_id = (offsets[split] + dealt) % cfg.classes
            tracks.append((instance_id, class_id, _trajectory(rng, cfg)))
            instance_id += 1
        per_object = (cfg.proposals_per_frame // 2) // len(tracks)
        n_background = cfg.proposals_per_frame - per_object * len(tracks)
        for f in range(cfg.frames):
            frame_props = []
            for inst, class_id, traj in tracks:
                gt.append(GroundTruthObject(vid, f, class_id, inst, traj[f]))
                for _ in range(per_object):
                    jb = _jittered(rng, traj[f], cfg.jitter, cfg.width, cfg.height)
                    if jb is not None:
                        frame_props.append(jb)
            frame_props.extend(_background(rng, cfg) for _ in range(n_background))
            order = rng.permutation(len(frame_props))
            proposals[(vid, f)] = [frame_props[i] for i in order]
    return SyntheticWorld(cfg, VID_CLASSES[: cfg.classes], videos, gt, proposals)


def generate_world(cfg: SimConfig, out_dir) -> DatasetManifest:
    """Write a synthetic dataset (manifest, ground truth, proposals) to ``out_dir``."""
    world = simulate_world(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt_path = out_dir / "ground_truth.jsonl"
    prop_path = out_dir / "proposals.jsonl"
    write_ground_truth(world.ground_truth, gt_path, world.class_names)
    write_proposals(
        [(v, f, b) for (v, f), boxes in world.proposals.items() for b in boxes], prop_path
    )
    manifest = DatasetManifest(
        classes=world.class_names,
        videos=world.videos,
        ground_truth=gt_path,
        proposals=prop_path,
        simulation=cfg.to_dict(),
        root=out_dir,
    )
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def world_from_manifest(manifest: DatasetManifest, ground_truth: Sequence[GroundTruthObject],
                        proposals: Mapping[tuple[str, int], Sequence[BoundingBox]]) -> SyntheticWorld:
    if manifest.simulation is None:
        raise ValueError("manifest carries no simulation parameters")
    cfg = SimConfig.from_mapping(manifest.simulation)
    return SyntheticWorld(cfg, manifest.classes, manifest.videos, list(ground_truth),
                          {k: list(v) for k, v in proposals.items()})

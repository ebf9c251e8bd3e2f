"""Line-delimited JSON interchange formats.

Every record file holds one JSON object per line. Floats are written with
Python's shortest round-trip repr, so write -> read is bit exact.

detection     {"video", "frame", "class", "score", "box": [x1, y1, x2, y2]}
ground truth  {"video", "frame", "class", "instance", "box"}
proposal      {"video", "frame", "box"}
tubelet       {"video", "class", "anchor_frame", "start_frame", "boxes",
               "det_scores", "track_scores", ["tcn_scores"], ["scheme"]}
report        {"type": "class" | "summary", "method", ...}

The manifest is a single JSON object (see :class:`DatasetManifest`).
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

from .geometry import BoundingBox, DegenerateBoxError, Detection, GroundTruthObject
from .tubelets import Tubelet, TubeletBox, anchor_offsets

MANIFEST_VERSION = 1


class DataFormatError(ValueError):
    """A record file could not be parsed or failed validation."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class SchemaError(DataFormatError):
    """A record is well formed but references unknown classes or videos."""


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    frame_count: int
    width: float
    height: float
    split: str = "test"

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError(f"video {self.video_id}: frame_count must be >= 1")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"video {self.video_id}: width and height must be positive")


@dataclass
class DatasetManifest:
    classes: list[str]
    videos: list[VideoMeta]
    ground_truth: Optional[Path] = None
    proposals: Optional[Path] = None
    detections: Optional[Path] = None
    simulation: Optional[dict] = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise SchemaError("class names must be unique")
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise SchemaError("video ids must be unique")

    @property
    def class_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.classes)}

    @property
    def video_index(self) -> dict[str, VideoMeta]:
        return {v.video_id: v for v in self.videos}

    def videos_in(self, split: Optional[str]) -> list[VideoMeta]:
        if split is None or split == "all":
            return list(self.videos)
        return [v for v in self.videos if v.split == split]


# -- low level ---------------------------------------------------------------

def _dumps(record: Mapping[str, Any]) -> str:
    return json.dumps(record, separators=(", ", ": "), allow_nan=False)


def _iter_records(path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"malformed record: {exc.msg}", path, lineno) from None
            if not isinstance(rec, dict):
                raise DataFormatError("record is not an object", path, lineno)
            yield lineno, rec


def _write_lines(path, lines: Iterable[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, path)


class _Context:
    """Validation context shared by the readers."""

    def __init__(self, path, classes: Optional[Sequence[str]], videos: Optional[Iterable[VideoMeta]]):
        self.path = path
        self.classes = list(classes) if classes is not None else None
        self.class_index = {c: i for i, c in enumerate(self.classes)} if self.classes is not None else None
        self.videos = {v.video_id: v for v in videos} if videos is not None else None

    def field(self, rec, key, lineno, kind=None):
        if key not in rec:
            raise DataFormatError(f"missing field '{key}'", self.path, lineno)
        value = rec[key]
        if isinstance(value, bool) or (kind is not None and not isinstance(value, kind)):
            raise DataFormatError(f"field '{key}' has wrong type", self.path, lineno)
        return value

    def real(self, rec, key, lineno) -> float:
        return self.number(self.field(rec, key, lineno), key, lineno)

    def number(self, value, name, lineno) -> float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise DataFormatError(f"'{name}' is not a number", self.path, lineno)
        value = float(value)
        if not math.isfinite(value):
            raise DataFormatError(f"'{name}' is not finite", self.path, lineno)
        return value

    def class_id(self, rec, lineno) -> int:
        name = self.field(rec, "class", lineno)
        if self.class_index is None:
            if isinstance(name, int):
                return name
            raise SchemaError(f"class '{name}' given but no class list to resolve it", self.path, lineno)
        if name not in self.class_index:
            raise SchemaError(f"unknown class '{name}'", self.path, lineno)
        return self.class_index[name]

    def class_name(self, class_id: int) -> Any:
        return self.classes[class_id] if self.classes is not None else class_id

    def video(self, rec, lineno) -> str:
        vid = self.field(rec, "video", lineno, str)
        if self.videos is not None and vid not in self.videos:
            raise SchemaError(f"unknown video '{vid}'", self.path, lineno)
        return vid

    def frame(self, rec, key, vid, lineno) -> int:
        f = self.field(rec, key, lineno, int)
        if f < 0:
            raise DataFormatError(f"negative frame index {f}", self.path, lineno)
        if self.videos is not None and f >= self.videos[vid].frame_count:
            raise SchemaError(
                f"frame {f} out of range for video '{vid}' ({self.videos[vid].frame_count} frames)",
                self.path, lineno,
            )
        return f

    def box(self, value, lineno) -> BoundingBox:
        if not isinstance(value, list) or len(value) != 4 or not all(
            isinstance(c, (int, float)) and not isinstance(c, bool) for c in value
        ):
            raise DataFormatError("box must be a list of 4 numbers", self.path, lineno)
        try:
            return BoundingBox.from_list(value)
        except DegenerateBoxError as exc:
            raise DataFormatError(str(exc), self.path, lineno) from None


# -- detections / ground truth / proposals -----------------------------------

def write_detections(dets: Iterable[Detection], path, classes: Optional[Sequence[str]] = None) -> None:
    def lines():
        for d in dets:
            yield _dumps({
                "video": d.video_id,
                "frame": d.frame,
                "class": classes[d.class_id] if classes is not None else d.class_id,
                "score": d.score,
                "box": d.box.to_list(),
            })
    _write_lines(path, lines())


def read_detections(path, classes: Optional[Sequence[str]] = None,
                    videos: Optional[Iterable[VideoMeta]] = None) -> list[Detection]:
    ctx = _Context(path, classes, videos)
    out = []
    for lineno, rec in _iter_records(path):
        vid = ctx.video(rec, lineno)
        out.append(Detection(
            video_id=vid,
            frame=ctx.frame(rec, "frame", vid, lineno),
            class_id=ctx.class_id(rec, lineno),
            score=ctx.real(rec, "score", lineno),
            box=ctx.box(ctx.field(rec, "box", lineno), lineno),
        ))
    return out


def write_ground_truth(objs: Iterable[GroundTruthObject], path, classes: Optional[Sequence[str]] = None) -> None:
    def lines():
        for g in objs:
            yield _dumps({
                "video": g.video_id,
                "frame": g.frame,
                "class": classes[g.class_id] if classes is not None else g.class_id,
                "instance": g.instance_id,
                "box": g.box.to_list(),
            })
    _write_lines(path, lines())


def read_ground_truth(path, classes: Optional[Sequence[str]] = None,
                      videos: Optional[Iterable[VideoMeta]] = None) -> list[GroundTruthObject]:
    ctx = _Context(path, classes, videos)
    out = []
    for lineno, rec in _iter_records(path):
        vid = ctx.video(rec, lineno)
        out.append(GroundTruthObject(
            video_id=vid,
            frame=ctx.frame(rec, "frame", vid, lineno),
            class_id=ctx.class_id(rec, lineno),
            instance_id=ctx.field(rec, "instance", lineno, int),
            box=ctx.box(ctx.field(rec, "box", lineno), lineno),
        ))
    return out


def trajectories(objs: Iterable[GroundTruthObject]) -> dict[tuple[str, int], dict[int, GroundTruthObject]]:
    """Group ground truth by (video, instance) into frame -> object maps."""
    out: dict[tuple[str, int], dict[int, GroundTruthObject]] = defaultdict(dict)
    for g in objs:
        out[(g.video_id, g.instance_id)][g.frame] = g
    return {k: dict(sorted(v.items())) for k, v in sorted(out.items())}


def write_proposals(props: Iterable[tuple[str, int, BoundingBox]], path) -> None:
    _write_lines(path, (_dumps({"video": v, "frame": f, "box": b.to_list()}) for v, f, b in props))


def read_proposals(path, videos: Optional[Iterable[VideoMeta]] = None) -> dict[tuple[str, int], list[BoundingBox]]:
    """Read proposals grouped by (video, frame), file order preserved within a frame."""
    ctx = _Context(path, None, videos)
    out: dict[tuple[str, int], list[BoundingBox]] = defaultdict(list)
    for lineno, rec in _iter_records(path):
        vid = ctx.video(rec, lineno)
        frame = ctx.frame(rec, "frame", vid, lineno)
        out[(vid, frame)].append(ctx.box(ctx.field(rec, "box", lineno), lineno))
    return dict(out)


def flatten_proposals(props: Mapping[tuple[str, int], Sequence[BoundingBox]]) -> list[tuple[str, int, BoundingBox]]:
    return [(v, f, b) for (v, f), boxes in sorted(props.items()) for b in boxes]


# -- tubelets ----------------------------------------------------------------

def write_tubelets(tubelets: Iterable[Tubelet], path, classes: Optional[Sequence[str]] = None) -> None:
    def lines():
        for t in tubelets:
            rec = {
                "video": t.video_id,
                "class": classes[t.class_id] if classes is not None else t.class_id,
                "anchor_frame": t.anchor_frame,
                "start_frame": t.start_frame,
                "boxes": [tb.box.to_list() for tb in t.boxes],
                "det_scores": [tb.det_score for tb in t.boxes],
                "track_scores": [tb.track_score for tb in t.boxes],
            }
            tcn = [tb.tcn_score for tb in t.boxes]
            if any(s is not None for s in tcn):
                if any(s is None for s in tcn):
                    raise ValueError("tcn_scores must be filled for every box or none")
                rec["tcn_scores"] = tcn
            if t.scheme is not None:
                rec["scheme"] = t.scheme
            try:
                yield _dumps(rec)
            except ValueError:
                raise ValueError(f"tubelet of video {t.video_id} has non-finite scores") from None
    _write_lines(path, lines())


def read_tubelets(path, classes: Optional[Sequence[str]] = None,
                  videos: Optional[Iterable[VideoMeta]] = None) -> list[Tubelet]:
    ctx = _Context(path, classes, videos)
    out = []
    for lineno, rec in _iter_records(path):
        vid = ctx.video(rec, lineno)
        class_id = ctx.class_id(rec, lineno)
        anchor = ctx.frame(rec, "anchor_frame", vid, lineno)
        start = ctx.frame(rec, "start_frame", vid, lineno)
        boxes = ctx.field(rec, "boxes", lineno, list)
        det = ctx.field(rec, "det_scores", lineno, list)
        trk = ctx.field(rec, "track_scores", lineno, list)
        tcn = rec.get("tcn_scores")
        n = len(boxes)
        if n == 0:
            raise DataFormatError("tubelet has no boxes", path, lineno)
        if len(det) != n or len(trk) != n or (tcn is not None and len(tcn) != n):
            raise DataFormatError("tubelet score arrays differ in length from boxes", path, lineno)
        end = start + n - 1
        if videos is not None:
            ctx.frame({"end": end}, "end", vid, lineno)
        tbs = []
        for i in range(n):
            tbs.append(TubeletBox(
                frame=start + i,
                box=ctx.box(boxes[i], lineno),
                det_score=ctx.number(det[i], "det_scores", lineno),
                track_score=ctx.number(trk[i], "track_scores", lineno),
                tcn_score=ctx.number(tcn[i], "tcn_scores", lineno) if tcn is not None else None,
            ))
        t = Tubelet(vid, class_id, anchor, tbs, scheme=rec.get("scheme"))
        anchor_offsets(t)
        try:
            t.validate()
        except ValueError as exc:
            raise DataFormatError(str(exc), path, lineno) from None
        out.append(t)
    return out


# -- manifest ----------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    root = path.parent

    def rel(p):
        if p is None:
            return None
        p = Path(p)
        try:
            return str(p.relative_to(root))
        except ValueError:
            return str(p)

    doc = {
        "format": "tubedet-manifest",
        "version": MANIFEST_VERSION,
        "classes": manifest.classes,
        "videos": [
            {"id": v.video_id, "frames": v.frame_count, "width": v.width, "height": v.height, "split": v.split}
            for v in manifest.videos
        ],
        "ground_truth": rel(manifest.ground_truth),
        "proposals": rel(manifest.proposals),
        "detections": rel(manifest.detections),
    }
    if manifest.simulation is not None:
        doc["simulation"] = manifest.simulation
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Load a manifest; referenced files are resolved relative to it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataFormatError("manifest not found", path) from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed manifest: {exc.msg}", path, exc.lineno) from None
    if not isinstance(doc, dict) or "classes" not in doc or "videos" not in doc:
        raise DataFormatError("manifest needs 'classes' and 'videos'", path)
    try:
        videos = [
            VideoMeta(v["id"], int(v["frames"]), float(v["width"]), float(v["height"]), v.get("split", "test"))
            for v in doc["videos"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad video entry: {exc}", path) from None

    root = path.parent

    def resolve(key):
        value = doc.get(key)
        if value is None:
            return None
        p = root / value
        if check_files and not p.exists():
            raise DataFormatError(f"'{key}' file {p} does not exist", path)
        return p

    return DatasetManifest(
        classes=list(doc["classes"]),
        videos=videos,
        ground_truth=resolve("ground_truth"),
        proposals=resolve("proposals"),
        detections=resolve("detections"),
        simulation=doc.get("simulation"),
        root=root,
    )


# -- evaluation reports ------------------------------------------------------

def write_report_records(records: Iterable[Mapping[str, Any]], path) -> None:
    _write_lines(path, (_dumps(dict(r)) for r in records))


def read_report_records(path) -> list[dict]:
    return [rec for _, rec in _iter_records(path)]

"""End-to-end runner: filter -> score -> propose -> perturb/pool -> TCN -> eval.

Every stage persists its output in the run directory so a run can resume
from any stage. The effective configuration is copied there as
``config.ini``.
"""

from __future__ import annotations

import configparser
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence


from . import dataio
from .dataio import DatasetManifest
from .evaluate import EvalReport, evaluate, format_table, format_tsv, tubelet_detections
from .geometry import Detection, nms
from .oracles import (
    DetectorOracle,
    FileDetector,
    GtFollowTracker,
    IouChainTracker,
    SimConfig,
    SyntheticDetector,
    TrackerOracle,
    filter_proposals,
    generate_world,
)
from .perturb import PerturbConfig, parse_scheme, perturb_and_pool
from .tcn import TcnArchitecture, TrainConfig, rescore, save_model, train, training_set
from .tubelets import ProposalConfig, Tubelet, propose_tubelets

log = logging.getLogger(__name__)

STAGES = ("simulate", "filter", "score", "propose", "perturb", "tcn", "eval")
ABLATIONS = ("all", "baseline", "perturb", "tcn")
WORKERS_ENV = "TUBEDET_WORKERS"


class ConfigError(ValueError):
    pass


class StageInputMissing(ConfigError):
    def __init__(self, path, stage):
        super().__init__(f"missing {path}; run the '{stage}' stage first")
        self.path, self.stage = path, stage


@dataclass
class PipelineConfig:
    output: Path = Path("run")
    dataset: Optional[Path] = None  # manifest; simulated into the run dir when empty
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    filter_threshold: float = -1.1
    detector: str = "auto"  # auto | synthetic | file
    tracker: str = "gt_follow"  # gt_follow | iou_chain
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: TcnArchitecture = field(default_factory=TcnArchitecture)
    eval_iou: float = 0.5
    still_image_nms: float = 0.3
    fuse: bool = False
    figures: bool = True
    ablation: str = "all"

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.detector not in ("auto", "synthetic", "file"):
            raise ConfigError("detector must be auto, synthetic or file")
        if self.tracker not in ("gt_follow", "iou_chain"):
            raise ConfigError("tracker must be gt_follow or iou_chain")
        if not 0.0 <= self.eval_iou <= 1.0:
            raise ConfigError("eval iou must be in [0, 1]")

    # -- INI ------------------------------------------------------------------

    @classmethod
    def from_ini(cls, path, overrides: Optional[dict] = None) -> "PipelineConfig":
        """Load a config file; ``path`` may be ``"default"`` for the shipped one.

        ``overrides`` maps "section.key" to a string value and wins over the file.
        """
        parser = configparser.ConfigParser()
        if str(path) == "default":
            parser.read_string(resources.files("tubedet").joinpath("default.ini").read_text())
        elif not parser.read(path):
            raise ConfigError(f"config file {path} not found")
        for dotted, value in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            if not parser.has_section(section):
                parser.add_section(section)
            parser[section][key] = str(value)
        try:
            return cls.from_parser(parser)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def from_parser(cls, p: configparser.ConfigParser) -> "PipelineConfig":
        known = {
            "paths": {"output", "dataset"},
            "pipeline": {"seed", "ablation", "detector", "tracker"},
            "simulate": {f.name for f in fields(SimConfig)},
            "filter": {"threshold"},
            "proposal": {f.name for f in fields(ProposalConfig)},
            "perturb": {"schemes", "combine"},
            "train": {f.name for f in fields(TrainConfig) if f.name != "seed"} | {"channels"},
            "eval": {"iou", "still_image_nms", "fuse", "figures"},
        }
        for section in p.sections():
            if section not in known:
                raise ConfigError(f"unknown config section [{section}]")
            extra = set(p[section]) - known[section]
            if extra:
                raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(extra))}")

        def get(section, key, conv, default):
            if p.has_section(section) and key in p[section]:
                return conv(p[section][key])
            return default

        seed = get("pipeline", "seed", int, 0)
        sim_values = dict(p["simulate"]) if p.has_section("simulate") else {}
        sim_values.setdefault("seed", str(seed))
        sim = SimConfig.from_mapping(sim_values)

        proposal = ProposalConfig(**{
            f.name: get("proposal", f.name, int if f.name == "max_anchors_per_class" else float,
                        getattr(ProposalConfig(), f.name))
            for f in fields(ProposalConfig)
        })
        schemes_text = get("perturb", "schemes", str, "R(20,0.2); O(0.5)")
        schemes = tuple(parse_scheme(s) for s in schemes_text.replace(";", "\n").splitlines() if s.strip())
        perturb = PerturbConfig(schemes, seed, get("perturb", "combine", str, "tubelets"))

        tdef = TrainConfig()
        train_cfg = TrainConfig(
            learning_rate=get("train", "learning_rate", float, tdef.learning_rate),
            momentum=get("train", "momentum", float, tdef.momentum),
            iterations=get("train", "iterations", int, tdef.iterations),
            batch_size=get("train", "batch_size", int, tdef.batch_size),
            label_iou=get("train", "label_iou", float, tdef.label_iou),
            window_stride=get("train", "window_stride", int, tdef.window_stride),
            seed=seed,
        )
        width = get("train", "channels", int, 256)
        arch = TcnArchitecture(channels=(width, width, width, 2))

        dataset = get("paths", "dataset", str, "")
        cfg = cls(
            output=Path(get("paths", "output", str, "run")),
            dataset=Path(dataset) if dataset else None,
            seed=seed,
            sim=sim,
            filter_threshold=get("filter", "threshold", float, -1.1),
            detector=get("pipeline", "detector", str, "auto"),
            tracker=get("pipeline", "tracker", str, "gt_follow"),
            proposal=proposal,
            perturb=perturb,
            train=train_cfg,
            arch=arch,
            eval_iou=get("eval", "iou", float, 0.5),
            still_image_nms=get("eval", "still_image_nms", float, 0.3),
            fuse=get("eval", "fuse", _bool, False),
            figures=get("eval", "figures", _bool, True),
            ablation=get("pipeline", "ablation", str, "all"),
        )
        cfg.validate()
        return cfg

    def to_ini(self) -> str:
        p = configparser.ConfigParser()
        p["paths"] = {"output": str(self.output), "dataset": str(self.dataset or "")}
        p["pipeline"] = {"seed": str(self.seed), "ablation": self.ablation,
                         "detector": self.detector, "tracker": self.tracker}
        p["simulate"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in self.sim.to_dict().items()}
        p["filter"] = {"threshold": repr(self.filter_threshold)}
        p["proposal"] = {f.name: str(getattr(self.proposal, f.name)) for f in fields(ProposalConfig)}
        p["perturb"] = {"schemes": "; ".join(str(s) for s in self.perturb.schemes), "combine": self.perturb.combine}
        p["train"] = {f.name: str(getattr(self.train, f.name)) for f in fields(TrainConfig) if f.name != "seed"}
        p["train"]["channels"] = str(self.arch.channels[0])
        p["eval"] = {"iou": str(self.eval_iou), "still_image_nms": str(self.still_image_nms),
                     "fuse": str(self.fuse).lower(), "figures": str(self.figures).lower()}
        lines = []
        for section in p.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in p[section].items())
            lines.append("")
        return "\n".join(lines)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _map_ordered(fn: Callable, items: Sequence) -> list:
    workers = worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# -- run directory layout ----------------------------------------------------

class RunPaths:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.config = self.root / "config.ini"
        self.dataset_dir = self.root / "dataset"
        self.filtered = self.root / "filtered_proposals.jsonl"
        self.detections = self.root / "detections.jsonl"
        self.proposals = self.root / "tubelets_proposal.jsonl"
        self.pooled = self.root / "tubelets_pooled.jsonl"
        self.models = self.root / "models"
        self.rescored = self.root / "tubelets_tcn.jsonl"
        self.report = self.root / "report.jsonl"
        self.table = self.root / "report.txt"
        self.tsv = self.root / "report.tsv"
        self.figures = self.root / "figures"

    @staticmethod
    def need(path: Path, stage: str) -> Path:
        if not path.exists():
            raise StageInputMissing(path, stage)
        return path


@dataclass
class RunResult:
    reports: list[EvalReport]
    paths: RunPaths
    tv_det: dict[str, float] = field(default_factory=dict)
    tv_tcn: dict[str, float] = field(default_factory=dict)

    def report(self, method: str) -> EvalReport:
        for r in self.reports:
            if r.method == method:
                return r
        raise KeyError(method)


# -- stages ------------------------------------------------------------------

class Context:
    """Dataset, oracles and settings shared by the stages of one run."""

    def __init__(self, cfg: PipelineConfig, manifest: DatasetManifest):
        self.cfg = cfg
        self.manifest = manifest
        self.videos = manifest.video_index
        if manifest.ground_truth is None:
            raise ConfigError("manifest has no ground truth file")
        self.gt = dataio.read_ground_truth(manifest.ground_truth, manifest.classes, manifest.videos)
        self._detector: Optional[DetectorOracle] = None

    def detector(self, detections_path: Optional[Path] = None) -> DetectorOracle:
        if self._detector is not None:
            return self._detector
        kind = self.cfg.detector
        if kind == "auto":
            kind = "synthetic" if self.manifest.simulation is not None else "file"
        if kind == "synthetic":
            if self.manifest.simulation is None:
                raise ConfigError("synthetic detector needs a simulated dataset")
            sim = SimConfig.from_mapping(self.manifest.simulation)
            self._detector = SyntheticDetector(self.gt, sim.a, sim.b, sim.sigma_det, sim.seed)
        else:
            path = detections_path or self.manifest.detections
            if path is None:
                raise ConfigError("file detector needs a detections file in the manifest")
            self._detector = FileDetector(dataio.read_detections(path, self.manifest.classes, self.manifest.videos))
        return self._detector

    def tracker(self, filtered) -> TrackerOracle:
        if self.cfg.tracker == "iou_chain":
            return IouChainTracker(filtered, self.manifest.videos)
        if self.manifest.simulation is None:
            raise ConfigError("gt_follow tracker needs a simulated dataset")
        sim = SimConfig.from_mapping(self.manifest.simulation)
        return GtFollowTracker(self.gt, self.manifest.videos, sim.drift, sim.conf_decay, sim.seed, sim.track_jitter, sim.track_scale_error)

    def units(self) -> list[tuple[str, int]]:
        return [(v.video_id, c) for v in sorted(self.manifest.videos, key=lambda v: v.video_id)
                for c in range(len(self.manifest.classes))]

    def eval_videos(self) -> set[str]:
        test = {v.video_id for v in self.manifest.videos_in("test")}
        return test or {v.video_id for v in self.manifest.videos}


def stage_filter(ctx: Context, paths: RunPaths) -> dict:
    if ctx.manifest.proposals is None:
        raise ConfigError("manifest has no proposals file")
    props = dataio.read_proposals(ctx.manifest.proposals, ctx.manifest.videos)
    detector = ctx.detector()
    classes = range(len(ctx.manifest.classes))
    keys = sorted(props)
    kept = _map_ordered(
        lambda k: filter_proposals(props[k], detector, k[0], k[1], classes, ctx.cfg.filter_threshold), keys)
    filtered = {k: boxes for k, boxes in zip(keys, kept)}
    dataio.write_proposals(dataio.flatten_proposals(filtered), paths.filtered)
    return filtered


def score_detections(filtered, detector: DetectorOracle, n_classes: int) -> list[Detection]:
    dets = []
    for (vid, frame), boxes in sorted(filtered.items()):
        if not boxes:
            continue
        for c in range(n_classes):
            for box, s in zip(boxes, detector.score_boxes(vid, frame, c, boxes)):
                dets.append(Detection(vid, frame, c, s, box))
    return dets


def stage_score(ctx: Context, paths: RunPaths, filtered) -> list[Detection]:
    dets = score_detections(filtered, ctx.detector(), len(ctx.manifest.classes))
    dataio.write_detections(dets, paths.detections, ctx.manifest.classes)
    return dets


def _group(dets: Iterable[Detection]) -> dict[tuple[str, int], list[Detection]]:
    out: dict[tuple[str, int], list[Detection]] = {}
    for d in dets:
        out.setdefault((d.video_id, d.class_id), []).append(d)
    return out


def stage_propose(ctx: Context, paths: RunPaths, filtered, dets) -> list[Tubelet]:
    tracker = ctx.tracker(filtered)
    detector = ctx.detector()
    grouped = _group(dets)

    def run(unit):
        vid, c = unit
        return propose_tubelets(ctx.videos[vid], c, grouped.get(unit, []), tracker, ctx.cfg.proposal, detector)

    tubelets = [t for ts in _map_ordered(run, ctx.units()) for t in ts]
    dataio.write_tubelets(tubelets, paths.proposals, ctx.manifest.classes)
    return tubelets


def stage_perturb(ctx: Context, paths: RunPaths, tubelets, dets) -> list[Tubelet]:
    detector = ctx.detector()
    grouped = _group(dets)
    pooled = _map_ordered(
        lambda t: perturb_and_pool([t], ctx.cfg.perturb, ctx.videos,
                                   grouped.get((t.video_id, t.class_id), []), detector),
        tubelets)
    pooled = [t for ts in pooled for t in ts]
    dataio.write_tubelets(pooled, paths.pooled, ctx.manifest.classes)
    return pooled


def stage_tcn(ctx: Context, paths: RunPaths, pooled) -> list[Tubelet]:
    cfg = ctx.cfg
    train_ids = {v.video_id for v in ctx.manifest.videos_in("train")}
    eval_ids = ctx.eval_videos()
    # every pooled copy on the training videos is a labelled example; only the
    # rescoring input is re-scored
    train_tubelets = [t for t in pooled if t.video_id in train_ids]
    pooled = cfg.perturb.rescoring_input(pooled)
    if not train_tubelets:
        raise ConfigError("TCN training needs tubelets on 'train' split videos")

    models = {}
    shared = None
    for c, name in enumerate(ctx.manifest.classes):
        cls_tubelets = [t for t in train_tubelets if t.class_id == c]
        if cls_tubelets:
            x, y, m = training_set(cls_tubelets, ctx.gt, cfg.train, cfg.arch.window)
            model, history = train(x, y, m, cfg.train, cfg.arch)
            log.info("tcn %s: %d windows, loss %.4f -> %.4f", name, len(x), history[0], history[-1])
        else:
            # no training tubelets for this class: fall back to a model fit on all classes
            if shared is None:
                x, y, m = training_set(train_tubelets, ctx.gt, cfg.train, cfg.arch.window)
                shared, _ = train(x, y, m, cfg.train, cfg.arch)
            model = shared
        save_model(model, paths.models / f"{name}.json")
        models[c] = model

    rescored = [rescore(models[t.class_id], t, cfg.train.window_stride) for t in pooled if t.video_id in eval_ids]
    dataio.write_tubelets(rescored, paths.rescored, ctx.manifest.classes)
    return rescored


def still_image_detections(dets: Iterable[Detection], overlap: float) -> list[Detection]:
    by_frame: dict[tuple[str, int, int], list[Detection]] = {}
    for d in dets:
        by_frame.setdefault((d.video_id, d.frame, d.class_id), []).append(d)
    return [k for key in sorted(by_frame) for k in nms(by_frame[key], overlap)]


def _methods(cfg: PipelineConfig, pooled: Optional[list[Tubelet]]) -> list[tuple[str, Optional[str]]]:
    """(method name, scheme filter) rows for the pooled tubelets.

    One row per scheme, then the combination: the candidate-union copies in
    "candidates" mode, the union of all copies in "tubelets" mode.
    """
    if pooled is None:
        return []
    schemes = [str(s) for s in cfg.perturb.schemes]
    if len(schemes) == 1:
        return [(schemes[0], None)]
    combined = cfg.perturb.combined_name
    if cfg.perturb.combine == "candidates":
        return [(s, s) for s in schemes] + [(combined, combined)]
    return [(s, s) for s in schemes] + [(combined, None)]


def stage_eval(ctx: Context, paths: RunPaths, dets, proposals, pooled, rescored) -> RunResult:
    cfg = ctx.cfg
    keep = ctx.eval_videos()
    gts = [g for g in ctx.gt if g.video_id in keep]
    names = ctx.manifest.classes

    def only(tubelets):
        return [t for t in tubelets if t.video_id in keep]

    reports = []
    method_dets = {}
    still = still_image_detections([d for d in dets if d.video_id in keep], cfg.still_image_nms)
    reports.append(evaluate(still, gts, names, "still_image", cfg.eval_iou))
    method_dets["still_image"] = still
    base = only(proposals)
    method_dets["baseline"] = tubelet_detections(base)
    reports.append(evaluate(method_dets["baseline"], gts, names, "baseline", cfg.eval_iou, tubelets=base))
    for method, scheme in _methods(cfg, pooled):
        sel = [t for t in only(pooled) if scheme is None or t.scheme == scheme]
        method_dets[method] = tubelet_detections(sel)
        reports.append(evaluate(method_dets[method], gts, names, method, cfg.eval_iou, tubelets=sel))
    result = RunResult(reports, paths)
    if rescored is not None:
        sel = only(rescored)
        method_dets["tcn"] = tubelet_detections(sel, "tcn", cfg.fuse)
        tcn_report = evaluate(method_dets["tcn"], gts, names, "tcn", cfg.eval_iou,
                              tubelets=sel, score="tcn")
        reports.append(tcn_report)
        det_tv = evaluate(tubelet_detections(sel), gts, names, "tcn_input", cfg.eval_iou, tubelets=sel)
        result.tv_det = {c.name: c.temporal_variation for c in det_tv.classes if c.temporal_variation is not None}
        result.tv_tcn = {c.name: c.temporal_variation for c in tcn_report.classes if c.temporal_variation is not None}

    dataio.write_report_records([rec for r in reports for rec in r.records()], paths.report)
    paths.table.write_text(format_table(reports, cfg.eval_iou), encoding="utf-8")
    paths.tsv.write_text(format_tsv(reports), encoding="utf-8")
    if cfg.figures:
        from . import plotting
        plotting.render_run_figures(paths.figures, reports, method_dets, gts, names, rescored and only(rescored), cfg.eval_iou)
    return result


# -- driver ------------------------------------------------------------------

def _load_tubelets(path: Path, stage: str, manifest: DatasetManifest):
    return dataio.read_tubelets(RunPaths.need(path, stage), manifest.classes, manifest.videos)


def run_pipeline(cfg: PipelineConfig, from_stage: str = "simulate") -> RunResult:
    """Run (or resume) every stage up to evaluation and return the reports."""
    cfg.validate()
    if from_stage not in STAGES:
        raise ConfigError(f"unknown stage {from_stage!r}; choose from {', '.join(STAGES)}")
    start = STAGES.index(from_stage)
    paths = RunPaths(cfg.output)
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.config.write_text(cfg.to_ini(), encoding="utf-8")

    def runs(stage):
        return STAGES.index(stage) >= start

    if cfg.dataset is not None:
        manifest_path = Path(cfg.dataset)
    else:
        manifest_path = paths.dataset_dir / "manifest.json"
        if runs("simulate"):
            generate_world(cfg.sim, paths.dataset_dir)
    manifest = dataio.read_manifest(RunPaths.need(manifest_path, "simulate"))
    ctx = Context(cfg, manifest)

    if runs("filter"):
        filtered = stage_filter(ctx, paths)
    else:
        filtered = dataio.read_proposals(paths.need(paths.filtered, "filter"), manifest.videos)
    if runs("score"):
        dets = stage_score(ctx, paths, filtered)
    else:
        dets = dataio.read_detections(paths.need(paths.detections, "score"), manifest.classes, manifest.videos)
    if runs("propose"):
        proposals = stage_propose(ctx, paths, filtered, dets)
    else:
        proposals = _load_tubelets(paths.proposals, "propose", manifest)

    pooled = rescored = None
    if cfg.ablation != "baseline":
        if runs("perturb"):
            pooled = stage_perturb(ctx, paths, proposals, dets)
        else:
            pooled = _load_tubelets(paths.pooled, "perturb", manifest)
    if cfg.ablation in ("all", "tcn"):
        if runs("tcn"):
            rescored = stage_tcn(ctx, paths, pooled)
        else:
            rescored = _load_tubelets(paths.rescored, "tcn", manifest)
    return stage_eval(ctx, paths, dets, proposals, pooled, rescored)

"""Command line interface.

    tubedet simulate --out DIR [--seed N] [--set key=value ...]
    tubedet filter --manifest M --out filtered.jsonl --detections-out dets.jsonl
    tubedet propose --manifest M --detections D --out tubelets.jsonl
    tubedet perturb-pool --manifest M --tubelets T --detections D --out pooled.jsonl
    tubedet tcn train --manifest M --tubelets T --out-dir models/
    tubedet tcn rescore --manifest M --models models/ --tubelets T --out rescored.jsonl
    tubedet eval map --manifest M (--detections D | --tubelets T) --out report
    tubedet eval corloc --manifest M (--detections D | --tubelets T) --out report
    tubedet pipeline run --config default --out DIR

Exit codes: 0 success, 2 schema/config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import dataio
from .dataio import DataFormatError
from .evaluate import NoGroundTruth, evaluate, format_table, format_tsv, tubelet_detections
from .oracles import SimConfig, generate_world
from .perturb import PerturbConfig, parse_scheme, perturb_and_pool
from .pipeline import (
    ConfigError,
    Context,
    PipelineConfig,
    STAGES,
    ABLATIONS,
    run_pipeline,
    score_detections,
)
from .tcn import NumericalError, TcnArchitecture, TrainConfig, load_model, rescore, save_model, train, training_set
from .tubelets import ProposalConfig, propose_tubelets

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("tubedet")


class UsageError(Exception):
    pass


def _parser_error(parser):
    def error(message):
        parser.print_usage(sys.stderr)
        raise UsageError(message)
    return error


def _key_values(pairs: Optional[Sequence[str]]) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _context(args) -> Context:
    manifest = dataio.read_manifest(args.manifest)
    cfg = PipelineConfig(detector=getattr(args, "detector", "auto"), tracker=getattr(args, "tracker", "gt_follow"))
    return Context(cfg, manifest)


# -- commands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    values = _key_values(args.set)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = SimConfig.from_ini(args.config) if args.config else SimConfig()
    if values:
        merged = {k: str(v) for k, v in cfg.to_dict().items()}
        merged.update(values)
        cfg = SimConfig.from_mapping(merged)
    try:
        generate_world(cfg, args.out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(Path(args.out) / "manifest.json")
    return 0


def cmd_filter(args) -> int:
    ctx = _context(args)
    ctx.cfg.filter_threshold = args.threshold
    from .pipeline import RunPaths, stage_filter

    paths = RunPaths(Path(args.out).parent)
    paths.filtered = Path(args.out)
    filtered = stage_filter(ctx, paths)
    if args.detections_out:
        dets = score_detections(filtered, ctx.detector(), len(ctx.manifest.classes))
        dataio.write_detections(dets, args.detections_out, ctx.manifest.classes)
    return 0


def cmd_propose(args) -> int:
    ctx = _context(args)
    m = ctx.manifest
    dets = dataio.read_detections(args.detections, m.classes, m.videos)
    filtered = dataio.read_proposals(args.proposals, m.videos) if args.proposals else {}
    if args.tracker == "iou_chain" and not args.proposals:
        raise ConfigError("the iou_chain tracker needs --proposals")
    cfg = ProposalConfig(args.early_stop, args.anchor_min, args.suppression, args.max_anchors)
    tracker = ctx.tracker(filtered)
    detector = ctx.detector()
    grouped: dict = {}
    for d in dets:
        grouped.setdefault((d.video_id, d.class_id), []).append(d)
    tubelets = []
    for vid, c in ctx.units():
        tubelets.extend(propose_tubelets(ctx.videos[vid], c, grouped.get((vid, c), []), tracker, cfg, detector))
    dataio.write_tubelets(tubelets, args.out, m.classes)
    return 0


def cmd_perturb(args) -> int:
    ctx = _context(args)
    m = ctx.manifest
    tubelets = dataio.read_tubelets(args.tubelets, m.classes, m.videos)
    dets = dataio.read_detections(args.detections, m.classes, m.videos)
    schemes = tuple(parse_scheme(s) for s in (args.scheme or ["R(20,0.2)", "O(0.5)"]))
    cfg = PerturbConfig(schemes, args.seed, args.combine)
    pooled = perturb_and_pool(tubelets, cfg, ctx.videos, dets, ctx.detector())
    dataio.write_tubelets(pooled, args.out, m.classes)
    return 0


def _with_scheme(tubelets, scheme: Optional[str]):
    if scheme is None:
        return tubelets
    sel = [t for t in tubelets if t.scheme == scheme]
    if not sel:
        raise ConfigError(f"no tubelets tagged with scheme {scheme!r}")
    return sel


def cmd_tcn_train(args) -> int:
    manifest = dataio.read_manifest(args.manifest)
    gt = dataio.read_ground_truth(manifest.ground_truth, manifest.classes, manifest.videos)
    tubelets = _with_scheme(dataio.read_tubelets(args.tubelets, manifest.classes, manifest.videos), args.scheme)
    split = {v.video_id for v in manifest.videos_in(args.split)}
    cfg = TrainConfig(args.lr, args.momentum, args.iterations, args.batch_size, args.label_iou, args.stride, args.seed)
    arch = TcnArchitecture(channels=(args.channels, args.channels, args.channels, 2))
    out = Path(args.out_dir)
    for c, name in enumerate(manifest.classes):
        sel = [t for t in tubelets if t.class_id == c and t.video_id in split]
        if not sel:
            log.warning("no training tubelets for class %s; skipped", name)
            continue
        x, y, m = training_set(sel, gt, cfg, arch.window)
        model, history = train(x, y, m, cfg, arch)
        save_model(model, out / f"{name}.json")
        print(f"{name}\t{len(x)} windows\tloss {history[0]:.6f} -> {history[-1]:.6f}")
    return 0


def cmd_tcn_rescore(args) -> int:
    manifest = dataio.read_manifest(args.manifest)
    tubelets = _with_scheme(dataio.read_tubelets(args.tubelets, manifest.classes, manifest.videos), args.scheme)
    models = {}
    out = []
    for t in tubelets:
        name = manifest.classes[t.class_id]
        if name not in models:
            path = Path(args.models) / f"{name}.json"
            if not path.exists():
                raise ConfigError(f"no TCN model for class {name} at {path}")
            models[name] = load_model(path)
        out.append(rescore(models[name], t, args.stride))
    dataio.write_tubelets(out, args.out, manifest.classes)
    return 0


def _eval_inputs(args):
    manifest = dataio.read_manifest(args.manifest)
    gt = dataio.read_ground_truth(manifest.ground_truth, manifest.classes, manifest.videos)
    keep = {v.video_id for v in manifest.videos_in(args.split)}
    tubelets = None
    if args.detections:
        dets = dataio.read_detections(args.detections, manifest.classes, manifest.videos)
    elif args.tubelets:
        tubelets = [t for t in dataio.read_tubelets(args.tubelets, manifest.classes, manifest.videos)
                    if t.video_id in keep]
        dets = tubelet_detections(tubelets, args.score, args.fuse)
    else:
        raise ConfigError("give --detections or --tubelets")
    dets = [d for d in dets if d.video_id in keep]
    gt = [g for g in gt if g.video_id in keep]
    return manifest, gt, dets, tubelets


def _write_report(report, out_prefix: Optional[str], figures: bool, iou_thresh: float) -> None:
    table = format_table([report], iou_thresh)
    sys.stdout.write(table)
    if not out_prefix:
        return
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_report_records(report.records(), prefix.with_suffix(".jsonl"))
    prefix.with_suffix(".txt").write_text(table, encoding="utf-8")
    prefix.with_suffix(".tsv").write_text(format_tsv([report]), encoding="utf-8")
    if figures:
        from . import plotting
        plotting.ablation_bars([report], prefix.parent / f"{prefix.name}_map.png")


def cmd_eval_map(args) -> int:
    manifest, gt, dets, tubelets = _eval_inputs(args)
    report = evaluate(dets, gt, manifest.classes, args.method, args.iou, with_corloc=False,
                      tubelets=tubelets, score=args.score)
    _write_report(report, args.out, args.figures, args.iou)
    return 0


def cmd_eval_corloc(args) -> int:
    manifest, gt, dets, _ = _eval_inputs(args)
    report = evaluate(dets, gt, manifest.classes, args.method, args.iou, with_corloc=True)
    sys.stdout.write("class\tcorloc\n")
    for c in report.classes:
        if c.corloc is not None:
            sys.stdout.write(f"{c.name}\t{c.corloc:.4f}\n")
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        dataio.write_report_records(report.records(), prefix.with_suffix(".jsonl"))
    return 0


def cmd_pipeline_run(args) -> int:
    overrides = _key_values(args.set)
    if args.out:
        overrides["paths.output"] = args.out
    if args.seed is not None:
        overrides["pipeline.seed"] = str(args.seed)
        overrides["simulate.seed"] = str(args.seed)
    if args.ablation:
        overrides["pipeline.ablation"] = args.ablation
    if args.dataset:
        overrides["paths.dataset"] = args.dataset
    if args.no_figures:
        overrides["eval.figures"] = "false"
    cfg = PipelineConfig.from_ini(args.config, overrides)
    result = run_pipeline(cfg, from_stage=args.from_stage)
    sys.stdout.write(result.paths.table.read_text(encoding="utf-8"))
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tubedet", description="Tubelet-based video object detection pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="INI file with a [simulate] section")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a simulation key")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("filter", help="drop proposals whose best class score is below the threshold")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--detections-out", help="also write the per-class scored detections")
    s.add_argument("--threshold", type=float, default=-1.1)
    s.add_argument("--detector", choices=["auto", "synthetic", "file"], default="auto")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("propose", help="build tubelet proposals from scored detections")
    s.add_argument("--manifest", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--proposals", help="filtered proposals (needed by the iou_chain tracker)")
    s.add_argument("--out", required=True)
    s.add_argument("--tracker", choices=["gt_follow", "iou_chain"], default="gt_follow")
    s.add_argument("--detector", choices=["auto", "synthetic", "file"], default="auto")
    s.add_argument("--early-stop", type=float, default=0.1)
    s.add_argument("--anchor-min", type=float, default=0.0)
    s.add_argument("--suppression", type=float, default=0.3)
    s.add_argument("--max-anchors", type=int, default=20)
    s.set_defaults(func=cmd_propose)

    s = sub.add_parser("perturb-pool", help="perturb tubelet boxes and max-pool detector scores")
    s.add_argument("--manifest", required=True)
    s.add_argument("--tubelets", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scheme", action="append", help="R(n,r) or O(t); repeatable")
    s.add_argument("--combine", choices=["tubelets", "candidates"], default="candidates")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--detector", choices=["auto", "synthetic", "file"], default="auto")
    s.set_defaults(func=cmd_perturb)

    tcn = sub.add_parser("tcn", help="temporal convolutional re-scoring").add_subparsers(dest="tcn_command", required=True)
    s = tcn.add_parser("train", help="train one TCN per class")
    s.add_argument("--manifest", required=True)
    s.add_argument("--tubelets", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--iterations", type=int, default=80)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--label-iou", type=float, default=0.5)
    s.add_argument("--stride", type=int, default=25)
    s.add_argument("--channels", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scheme", help="only use pooled tubelets tagged with this scheme")
    s.set_defaults(func=cmd_tcn_train)
    s = tcn.add_parser("rescore", help="fill tcn_scores with trained models")
    s.add_argument("--manifest", required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--tubelets", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=25)
    s.add_argument("--scheme", help="only rescore pooled tubelets tagged with this scheme")
    s.set_defaults(func=cmd_tcn_rescore)

    ev = sub.add_parser("eval", help="evaluation").add_subparsers(dest="eval_command", required=True)
    for name, func in (("map", cmd_eval_map), ("corloc", cmd_eval_corloc)):
        s = ev.add_parser(name)
        s.add_argument("--manifest", required=True)
        src = s.add_mutually_exclusive_group(required=True)
        src.add_argument("--detections")
        src.add_argument("--tubelets")
        s.add_argument("--score", choices=["det", "tcn"], default="det", help="tubelet score to evaluate")
        s.add_argument("--fuse", action="store_true", help="multiply TCN score by logistic(det score)")
        s.add_argument("--split", default="all", help="video split to evaluate (train, test or all)")
        s.add_argument("--iou", type=float, default=0.5)
        s.add_argument("--method", default="detections", help="label for the report rows")
        s.add_argument("--out", help="output prefix for .jsonl/.txt/.tsv")
        s.add_argument("--figures", action="store_true", help="also render a mean-AP bar chart")
        s.set_defaults(func=func)

    pl = sub.add_parser("pipeline", help="end-to-end runs").add_subparsers(dest="pipeline_command", required=True)
    s = pl.add_parser("run")
    s.add_argument("--config", default="default", help="INI file or 'default'")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--dataset", help="existing manifest instead of simulating")
    s.add_argument("--ablation", choices=ABLATIONS)
    s.add_argument("--from-stage", choices=STAGES, default="simulate")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_pipeline_run)

    for action in p._actions:
        if isinstance(action, argparse._SubParsersAction):
            _patch(action)
    p.error = _parser_error(p)
    return p


def _patch(subparsers_action):
    for parser in subparsers_action.choices.values():
        parser.error = _parser_error(parser)
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                _patch(action)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"tubedet: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"tubedet: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataFormatError, NoGroundTruth, FileNotFoundError, ValueError) as exc:
        print(f"tubedet: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

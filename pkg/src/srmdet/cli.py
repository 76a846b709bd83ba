"""Command-line entry point: ``srmdet <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config, write_resolved
from .dataset import AnnotationError, class_vocabulary, generate_scenes, load_profile, read_scenes, write_scenes
from .detect import EngineConfig, read_detections, run_corpus, write_detections
from .evaluation import ab_report, dump_record, evaluate, metrics_record, metrics_table
from .scorers import ExternalScorer, OracleScorer
from .srm import ModelError, load_srm, save_srm, train_srm

log = logging.getLogger("srmdet")


class CommandError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def cmd_train_srm(args) -> int:
    scenes = read_scenes(args.annotations, args.format)
    if not scenes:
        raise CommandError(f"no scenes found in {args.annotations}")
    model = train_srm(scenes, include_difficult=not args.exclude_difficult)
    save_srm(model, args.out)
    unseen = model.metadata["unseen_pairs"]
    print(f"classes: {model.n} ({', '.join(model.classes)})")
    print(f"scenes: {len(scenes)}  instances: {int(model.instance_count.sum())}  unseen pairs: {unseen}")
    for c, k in zip(model.classes, model.instance_count):
        print(f"  {c:<20}{int(k):>8}")
    return 0


def _engine_overrides(cfg: RunConfig, args) -> RunConfig:
    engine = cfg.engine
    changes = {}
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        engine = EngineConfig(**{**engine.__dict__, **changes})
    scorer = cfg.scorer
    if args.scorer is not None:
        scorer = replace(scorer, spec=args.scorer)
    if args.noise is not None:
        scorer = replace(scorer, noise_sigma=args.noise)
    workers = args.workers if args.workers is not None else cfg.workers
    return RunConfig(engine, scorer, cfg.evaluation, workers)


def cmd_detect(args) -> int:
    cfg = _engine_overrides(load_config(args.config), args)
    model = load_srm(args.srm)
    scenes = read_scenes(args.scenes, args.format)
    unknown = sorted(set(class_vocabulary(scenes)) - set(model.classes))
    if unknown:
        raise CommandError(f"scene classes not in the model vocabulary: {unknown}")
    if cfg.scorer.command is not None:
        scorer = ExternalScorer(cfg.scorer.command, model.classes, cfg.scorer.timeout)
    else:
        scorer = OracleScorer(scenes, model.classes, cfg.scorer.noise_sigma, cfg.scorer.seed)
    try:
        results = run_corpus(scenes, model, scorer, cfg.engine, cfg.workers)
    finally:
        if isinstance(scorer, ExternalScorer):
            scorer.close()
    with open(args.out, "w", encoding="utf-8") as f:
        write_detections(results, f, cfg.engine.mode, model.classes)
    write_resolved(cfg, args.out, "detect")
    failed = [r.scene_id for r in results if r.error]
    n_det = sum(len(r.detections) for r in results)
    print(f"{len(results)} scenes, {n_det} detections, {len(failed)} failed scenes")
    for sid in failed:
        print(f"scene {sid} failed", file=sys.stderr)
    return 3 if (failed and args.strict) else 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    ev = cfg.evaluation
    difficult = args.difficult or ev.difficult
    iou_thresh = args.iou if args.iou is not None else ev.iou
    for p in args.detections + [args.ground_truth]:
        if not Path(p).exists():
            raise CommandError(f"file not found: {p}")
    gt = read_scenes(args.ground_truth, args.format)
    runs = []
    for p in args.detections:
        with open(p, encoding="utf-8") as f:
            _, results = read_detections(f)
        runs.append({r.scene_id: r.detections for r in results})
    if len(runs) == 1:
        report = evaluate(runs[0], gt, iou_thresh, difficult, ev.eleven_point)
        record, text = metrics_record(report), metrics_table(report)
    elif len(runs) == 2:
        ab = ab_report(runs[0], runs[1], gt, iou_thresh, difficult)
        record, text = ab.to_record(), ab.table()
    else:
        raise CommandError("give one detections file, or two (baseline then treatment)")
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(dump_record(record), encoding="utf-8")
        Path(str(args.out) + ".txt").write_text(text, encoding="utf-8")
        resolved = replace(cfg, evaluation=replace(ev, difficult=difficult, iou=iou_thresh))
        write_resolved(resolved, args.out, "evaluate")
    return 0


def cmd_gen_scenes(args) -> int:
    profile = load_profile(args.profile)
    if args.seed is not None:
        profile.seed = args.seed
    scenes = generate_scenes(profile, args.count)
    write_scenes(scenes, args.out, args.format)
    Path(str(args.out) + ".profile.json").write_text(json.dumps(profile.to_dict(), indent=2) + "\n",
                                                     encoding="utf-8")
    print(f"{len(scenes)} scenes written, {scenes.skipped} objects skipped")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srmdet", description="Context-driven detection orchestration.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-srm", help="train a spatial relation model from annotations")
    t.add_argument("--annotations", required=True)
    t.add_argument("--format", choices=("voc", "voc-dir", "jsonl"), default="jsonl")
    t.add_argument("--exclude-difficult", type=_bool, default=True, metavar="BOOL")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_srm)

    d = sub.add_parser("detect", help="run detection over a scene corpus")
    d.add_argument("--srm", required=True)
    d.add_argument("--scenes", required=True)
    d.add_argument("--format", choices=("voc", "voc-dir", "jsonl"), default="jsonl")
    d.add_argument("--scorer", help="oracle | external:CMD")
    d.add_argument("--noise", type=float, help="oracle noise sigma")
    d.add_argument("--mode", choices=("sparcnn", "baseline"))
    d.add_argument("--seed", type=int)
    d.add_argument("--config")
    d.add_argument("--workers", type=int)
    d.add_argument("--strict", action="store_true", help="exit 3 if any scene failed")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", help="score detections against ground truth")
    e.add_argument("--detections", action="append", required=True,
                   help="detections file; give twice for an A/B report (baseline first)")
    e.add_argument("--ground-truth", required=True)
    e.add_argument("--format", choices=("voc", "voc-dir", "jsonl"), default="jsonl")
    e.add_argument("--difficult", choices=("include", "ignore"))
    e.add_argument("--iou", type=float)
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gen-scenes", help="generate a synthetic annotated corpus")
    g.add_argument("--profile", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--format", choices=("voc", "voc-dir", "jsonl"), default="jsonl")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scenes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "format", None) == "voc":
        args.format = "voc-dir"
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CommandError, AnnotationError, ModelError, ValueError, OSError) as exc:
        print(f"srmdet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

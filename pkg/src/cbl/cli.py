"""Command line entry point: ``cbl gen | train | eval | inspect``.

Exit status is 0 on success, 2 for configuration or input errors and 3 when
training aborts at runtime.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, ConfigError, RunConfig, config_from_dict, load_config, write_config
from .crd import build_positive_set, tau_schedule
from .eval import SCORE_SOURCES, EvalConfig, evaluate
from .model import student_forward
from .msr import ensemble_scores, mine_seeds, seed_confidence
from .synthscene import Scene, gen_corpus, load_snapshot, save_snapshot, split
from .trainer import (TrainingAborted, TrainState, load_checkpoint, read_checkpoint, save_checkpoint, train,
                      write_history)
from .wet import wet_forward

log = logging.getLogger("cbl")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


class InputError(Exception):
    """A file the command needs is missing or unreadable."""


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="YAML config file")
    p.add_argument("-p", "--preset", action="append", default=[], choices=sorted(PRESETS),
                   help="preset applied before the config file; repeatable")
    p.add_argument("-s", "--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="override one field after the config file; repeatable")
    p.add_argument("--dataset", help="dataset snapshot (default: generate from the gen section)")
    p.add_argument("--output-dir", help="output directory (relative paths honour $CBL_OUTPUT_ROOT)")
    p.add_argument("--seed", type=int, help="shorthand for setting gen.seed and train.seed")


def _resolve(args) -> RunConfig:
    overrides = list(args.set)
    if getattr(args, "dataset", None):
        overrides.append(f"dataset={json.dumps(args.dataset)}")
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if getattr(args, "seed", None) is not None:
        overrides += [f"gen.seed={args.seed}", f"train.seed={args.seed}"]
    return load_config(args.config, args.preset, overrides)


def _scenes(cfg: RunConfig) -> list[Scene]:
    if cfg.dataset is None:
        return gen_corpus(cfg.gen)
    path = Path(cfg.dataset)
    if not path.is_file():
        raise InputError(f"dataset {path} not found")
    scenes, _ = load_snapshot(path)
    if not scenes:
        raise InputError(f"dataset {path} holds no scenes")
    return scenes


def _write_metrics_csv(path: Path, metrics: dict) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "class", "value"])
        for key in ("mAP", "CorLoc", "mAcc@1@0.75", "mAcc@1@0.85"):
            w.writerow([key, "all", repr(metrics[key])])
        for group in ("AP", "Acc@1@0.75", "Acc@1@0.85"):
            for c, v in metrics[group].items():
                w.writerow([group, c, repr(v)])


def cmd_gen(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out) if args.out else cfg.output_path() / "dataset.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    scenes = gen_corpus(cfg.gen)
    save_snapshot(scenes, out, cfg.gen)
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    scenes = _scenes(cfg)
    train_split, test_split = split(scenes)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.yaml")
    stored = cfg.to_dict()
    every = cfg.train.checkpoint_every
    report_every = max(1, cfg.train.iterations // 20)

    def callback(state: TrainState) -> None:
        if every and state.iteration % every == 0 and state.iteration < cfg.train.iterations:
            save_checkpoint(out / f"checkpoint_{state.iteration}.ckpt", state, stored)
        if state.iteration % report_every == 0 and state.history and state.history[-1].iteration == state.iteration - 1:
            h = state.history[-1]
            log.info("iter %d  total %.4f  midn %.4f  crd %.5f", state.iteration, h.total, h.midn, h.crd)

    try:
        state = train(cfg.train, train_split, cfg.ema, cfg.crd, callback=callback)
    except TrainingAborted as exc:
        (out / "diagnostics.json").write_text(json.dumps({"error": str(exc), **exc.diagnostics}, indent=2))
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    save_checkpoint(out / "checkpoint.ckpt", state, stored)
    write_history(out / "history.csv", state.history, cfg.train.num_oic)
    metrics = evaluate(state.student, state.teacher, train_split, test_split, cfg.eval)
    (out / "summary.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    _write_metrics_csv(out / "metrics.csv", metrics)
    print(json.dumps({k: metrics[k] for k in ("mAP", "CorLoc", "mAcc@1@0.75", "mAcc@1@0.85")}))
    return EXIT_OK


def _restore(args) -> tuple[RunConfig, TrainState]:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"checkpoint {ckpt} not found")
    header, _ = read_checkpoint(ckpt)
    cfg = config_from_dict(header["config"]) if header.get("config") else RunConfig()
    if args.dataset:
        cfg.dataset = args.dataset
    return cfg, load_checkpoint(ckpt, cfg.train, cfg.ema)


def cmd_eval(args) -> int:
    cfg, state = _restore(args)
    ecfg = EvalConfig(score_source=args.score_source or cfg.eval.score_source,
                      nms_thresh=cfg.eval.nms_thresh if args.nms_thresh is None else args.nms_thresh,
                      score_floor=cfg.eval.score_floor if args.score_floor is None else args.score_floor)
    train_split, test_split = split(_scenes(cfg))
    metrics = evaluate(state.student, state.teacher, train_split, test_split, ecfg)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(text)
        _write_metrics_csv(out / "metrics.csv", metrics)
    print(text)
    return EXIT_OK


def inspect_scene(cfg: RunConfig, state: TrainState, scene: Scene, tau: float | None = None,
                  top: int = 5) -> dict:
    """Per-scene label dump: MIDN and teacher rankings, positive sets, mined seeds."""
    fwd = student_forward(state.student, scene.features)
    x_midn = fwd.midn.x_midn
    if tau is None:
        tau = tau_schedule(state.iteration, cfg.crd)
    x_wet = wet_forward(state.teacher, scene.features) if state.teacher is not None else None
    teacher = x_wet if x_wet is not None else fwd.oic_probs[-1]
    ov = scene.overlaps
    gt_ov = scene.gt_overlaps

    def ranked(row: np.ndarray) -> list[dict]:
        order = np.lexsort((np.arange(len(row)), -row))[:top]
        return [{"proposal": int(i), "score": float(row[i]), "gt_iou": float(gt_ov[i].max())} for i in order]

    classes = []
    for c in scene.present_classes:
        ps = build_positive_set(teacher, scene.proposals, int(c), tau, ov)
        classes.append({
            "class": int(c),
            "midn_top": ranked(x_midn[c]),
            "teacher_top": ranked(teacher[c]),
            "positive_set": {"anchor": int(ps.anchor), "weight": ps.weight,
                             "members": [int(i) for i in ps.members]},
        })
    seeds = []
    if x_wet is not None:
        t = cfg.train
        x_msr = ensemble_scores(x_wet, fwd.oic_probs[-1])
        mined = mine_seeds(x_msr, scene.proposals, scene.y_img, t.mu_s, t.mu_n, t.msr_nms_thresh, ov)
        mined = seed_confidence(mined, [fwd.oic_probs[-1], x_wet], scene.proposals, t.gamma, t.mu_s, t.mu_n,
                                t.match_thresh, ov)
        seeds = [{"proposal": s.index, "class": s.cls, "x_msr": s.score, "p": s.p, "w": s.weight,
                  "gt_iou": float(gt_ov[s.index].max())} for s in mined]
    return {"scene": int(scene.id), "iteration": state.iteration, "tau": float(tau),
            "teacher": "wet" if x_wet is not None else "oic_last", "classes": classes, "seeds": seeds}


def cmd_inspect(args) -> int:
    cfg, state = _restore(args)
    scenes = {s.id: s for s in _scenes(cfg)}
    if args.scene not in scenes:
        raise InputError(f"scene {args.scene} not in dataset")
    dump = inspect_scene(cfg, state, scenes[args.scene], args.tau, args.top)
    print(json.dumps(dump, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbl", description="Cyclic bootstrap labelling on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset snapshot")
    _add_config_args(p)
    p.add_argument("-o", "--out", help="snapshot path (default: <output_dir>/dataset.jsonl)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train and evaluate one run")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="override the dataset stored with the checkpoint")
    p.add_argument("--score-source", choices=SCORE_SOURCES)
    p.add_argument("--nms-thresh", type=float)
    p.add_argument("--score-floor", type=float)
    p.add_argument("-o", "--out", help="directory for summary.json and metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump pseudo labels for one scene")
    p.add_argument("checkpoint")
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--dataset", help="override the dataset stored with the checkpoint")
    p.add_argument("--tau", type=float, help="positive-set threshold (default: schedule at the checkpoint)")
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT

"""Experiment runner CLI: gen-data / run / ablate / eval.

Configuration lives in a small versioned JSON file. Unknown keys are
rejected so typos fail loudly instead of silently using defaults. Reports
come in two forms: machine-readable JSON (no timestamps, byte-stable for a
fixed config and seed) and an aligned-column text table.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import losses as ls
from .detector import DetectorConfig, DetectorError, load_checkpoint, save_checkpoint
from .protocol import (
    ABLATION_ORDER,
    METHOD_PRESETS,
    ProtocolError,
    TaskSchedule,
    TrainConfig,
    evaluate_model,
    run_experiment,
)
from .synthdata import DataError, file_checksum, generate_corpus, load_corpus, save_corpus

CONFIG_VERSION = 1

TASKS = ("detection", "instance-segmentation")

# numeric knobs a config may override; the variant selectors stay with the
# method preset
WEIGHT_KEYS = ("lambda1", "lambda2", "lambda3", "tau")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config parsing


def _expect_keys(mapping, allowed, where):
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _override_dataclass(cls, overrides, where, **fixed):
    names = {f.name for f in dataclasses.fields(cls)}
    _expect_keys(overrides, names - set(fixed), where)
    try:
        return cls(**overrides, **fixed)
    except (ProtocolError, TypeError) as err:
        raise ConfigError(f"bad {where}: {err}")


@dataclasses.dataclass
class ExperimentConfig:
    """Parsed and validated experiment description."""

    classes: int
    scenes: int
    seed: int
    corpus_path: str | None
    schedule: str
    method: str
    task: str
    output_dir: str
    train: dict
    weights: dict
    echo: dict

    def train_config(self):
        train = dict(self.train)
        if "tau" in self.weights:
            train["tau"] = self.weights["tau"]
        return _override_dataclass(TrainConfig, train, "train", seed=self.seed)

    def base_weights(self):
        if not self.weights:
            return None
        try:
            return ls.LossWeights(**self.weights)
        except ls.LossError as err:
            raise ConfigError(f"bad weights: {err}")


def parse_config(path):
    """Load, validate and normalize a JSON experiment config."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    _expect_keys(
        raw,
        ("version", "corpus", "schedule", "method", "task", "train", "weights",
         "output_dir"),
        "config",
    )
    version = raw.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    for key in ("corpus", "schedule", "method", "output_dir"):
        if key not in raw:
            raise ConfigError(f"config is missing required key {key!r}")

    corpus = raw["corpus"]
    if not isinstance(corpus, dict):
        raise ConfigError("corpus must be an object")
    if "path" in corpus:
        _expect_keys(corpus, ("path",), "corpus")
        classes = scenes = seed = None
        corpus_path = corpus["path"]
    else:
        _expect_keys(corpus, ("classes", "scenes", "seed"), "corpus")
        for key in ("classes", "scenes", "seed"):
            if key not in corpus:
                raise ConfigError(f"corpus is missing key {key!r}")
            if not isinstance(corpus[key], int):
                raise ConfigError(f"corpus.{key} must be an integer")
        classes, scenes, seed = corpus["classes"], corpus["scenes"], corpus["seed"]
        corpus_path = None

    method = raw["method"]
    if method not in METHOD_PRESETS:
        raise ConfigError(f"unknown method {method!r}; choose from {sorted(METHOD_PRESETS)}")
    task = raw.get("task", "detection")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
    train = raw.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("train must be an object")
    weights = raw.get("weights", {})
    if not isinstance(weights, dict):
        raise ConfigError("weights must be an object")
    _expect_keys(weights, WEIGHT_KEYS, "weights")

    cfg = ExperimentConfig(
        classes=classes,
        scenes=scenes,
        seed=seed if seed is not None else int(train.get("seed", 0)),
        corpus_path=corpus_path,
        schedule=str(raw["schedule"]),
        method=method,
        task=task,
        output_dir=raw["output_dir"],
        train=dict(train),
        weights=dict(weights),
        echo=raw,
    )
    cfg.train.pop("seed", None)
    cfg.train_config()  # fail fast on bad overrides
    cfg.base_weights()
    return cfg


def _load_or_generate(cfg, out_dir):
    """Resolve the corpus and its checksum, materializing it if needed."""
    if cfg.corpus_path is not None:
        try:
            corpus = load_corpus(cfg.corpus_path)
        except (OSError, DataError, KeyError) as err:
            raise ConfigError(f"cannot load corpus {cfg.corpus_path}: {err}")
        return corpus, file_checksum(cfg.corpus_path)
    corpus = generate_corpus(cfg.classes, cfg.scenes, seed=cfg.seed)
    path = os.path.join(out_dir, "corpus.npz")
    save_corpus(corpus, path)
    return corpus, file_checksum(path)


# ---------------------------------------------------------------------------
# report output


def _fmt(v, width=7):
    return f"{v:{width}.3f}" if v is not None else " " * (width - 1) + "-"


def report_dict(report):
    d = report.to_dict()
    d["per_class_ap"] = {
        k: (None if v is None else round(v, 6)) for k, v in d["per_class_ap"].items()
    }
    for k in ("old_map", "new_map", "all_map", "avg", "avg_s", "avg_s_alt"):
        if d[k] is not None:
            d[k] = round(d[k], 6)
    return d


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _step_lines(step, with_masks):
    rep = step.box_report
    lines = [
        f"step {step.step}  classes {list(step.classes)}",
        f"  box    old {_fmt(rep.old_map)}  new {_fmt(rep.new_map)}  "
        f"all {_fmt(rep.all_map)}  Avg {_fmt(rep.avg)}  Avg-S {_fmt(rep.avg_s)}",
    ]
    if with_masks and step.mask_report is not None:
        m = step.mask_report
        lines.append(
            f"  mask   old {_fmt(m.old_map)}  new {_fmt(m.new_map)}  all {_fmt(m.all_map)}"
        )
    return lines


def write_run_report(out_dir, cfg, checksum, result, elapsed):
    """Human-readable report.txt; metrics live in the per-step JSON files."""
    weights = METHOD_PRESETS[result.method]
    distill = weights["rcn_distill_variant"] != "none" or weights["rpn_distill"]
    lines = [
        f"incdet {__version__}  method={result.method}  schedule={cfg.schedule}  "
        f"seed={cfg.seed}",
        f"corpus sha256 {checksum}",
        "config: " + json.dumps(cfg.echo, sort_keys=True),
        "" if distill else "note: no distillation (plain fine-tuning objective)",
    ]
    for step in result.steps:
        lines.extend(_step_lines(step, cfg.task == "instance-segmentation"))
    final = result.steps[-1].box_report
    lines.append(f"final all-class mAP@0.5: {final.all_map:.4f}")
    lines.append(f"wall time: {elapsed:.1f}s")
    text = "\n".join(line for line in lines if line) + "\n"
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    return text


def _run_one(cfg, out_dir, method=None, tag=""):
    """Run one experiment, flushing metrics and checkpoints per step."""
    method = method or cfg.method
    corpus, checksum = _load_or_generate(cfg, out_dir)
    schedule = TaskSchedule.from_spec(cfg.schedule, corpus.num_classes)
    train = cfg.train_config()
    det_config = DetectorConfig(
        grid=corpus.grid,
        feat_dim=corpus.feat_dim,
        with_masks=cfg.task == "instance-segmentation",
    )
    base = {
        "version": __version__,
        "config": cfg.echo,
        "corpus_sha256": checksum,
        "method": method,
        "seed": cfg.seed,
    }

    def flush(model, step):
        payload = dict(
            base,
            step=step.step,
            classes=list(step.classes),
            final_loss=round(step.final_loss, 6),
            box=report_dict(step.box_report),
        )
        if step.mask_report is not None:
            payload["mask"] = report_dict(step.mask_report)
        _write_json(os.path.join(out_dir, f"{tag}step_{step.step}_metrics.json"), payload)
        save_checkpoint(model, os.path.join(out_dir, f"{tag}step_{step.step}.npz"))

    result = run_experiment(
        schedule, method, corpus, train, det_config=det_config, step_callback=flush,
        base_weights=cfg.base_weights(),
    )
    return result, checksum


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.classes < 2:
        raise ConfigError("--classes must be >= 2")
    if args.scenes < 1:
        raise ConfigError("--scenes must be >= 1")
    corpus = generate_corpus(args.classes, args.scenes, seed=args.seed)
    out = args.out if args.out.endswith(".npz") else args.out + ".npz"
    try:
        save_corpus(corpus, out)
    except OSError as err:
        raise ConfigError(f"cannot write {out}: {err}")
    manifest = {
        "version": __version__,
        "classes": args.classes,
        "scenes": args.scenes,
        "seed": args.seed,
        "test_scenes": len(corpus.test),
        "sha256": file_checksum(out),
    }
    _write_json(out + ".manifest.json", manifest)
    print(f"wrote {out} ({manifest['sha256'][:12]}...) and {out}.manifest.json")
    return 0


def cmd_run(args):
    cfg = parse_config(args.config)
    os.makedirs(cfg.output_dir, exist_ok=True)
    t0 = time.time()
    result, checksum = _run_one(cfg, cfg.output_dir)
    text = write_run_report(cfg.output_dir, cfg, checksum, result, time.time() - t0)
    print(text, end="")
    return 0


def cmd_ablate(args):
    cfg = parse_config(args.config)
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = []
    for method in ABLATION_ORDER:
        result, checksum = _run_one(cfg, cfg.output_dir, method=method, tag=f"{method}_")
        final = result.steps[-1].box_report
        rows.append(
            {
                "method": method,
                "old": final.old_map,
                "new": final.new_map,
                "all": final.all_map,
                "Avg": final.avg,
            }
        )
    _write_json(
        os.path.join(cfg.output_dir, "ablation.json"),
        {
            "version": __version__,
            "config": cfg.echo,
            "corpus_sha256": checksum,
            "seed": cfg.seed,
            "rows": [
                {k: (v if isinstance(v, str) else None if v is None else round(v, 6))
                 for k, v in row.items()}
                for row in rows
            ],
        },
    )
    lines = [f"{'method':<12}{'old':>8}{'new':>8}{'all':>8}{'Avg':>8}"]
    for row in rows:
        lines.append(
            f"{row['method']:<12}"
            + "".join(_fmt(row[k], 8) for k in ("old", "new", "all", "Avg"))
        )
    table = "\n".join(lines) + "\n"
    with open(os.path.join(cfg.output_dir, "ablation.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_eval(args):
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, DetectorError, KeyError) as err:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {err}")
    try:
        corpus = load_corpus(args.corpus)
    except (OSError, DataError, KeyError) as err:
        raise ConfigError(f"cannot load corpus {args.corpus}: {err}")
    if model.config.grid != corpus.grid or model.config.feat_dim != corpus.feat_dim:
        raise ConfigError(
            f"checkpoint expects grid {model.config.grid} / {model.config.feat_dim} "
            f"features, corpus has {corpus.grid} / {corpus.feat_dim}"
        )
    if any(c >= corpus.num_classes for c in model.class_ids):
        raise ConfigError(
            f"checkpoint classes {list(model.class_ids)} exceed corpus range "
            f"0..{corpus.num_classes - 1}"
        )
    box_report, mask_report = evaluate_model(
        model, corpus.test, tuple(model.class_ids), with_masks=model.config.with_masks
    )
    payload = {
        "version": __version__,
        "checkpoint": os.path.basename(args.checkpoint),
        "corpus_sha256": file_checksum(args.corpus),
        "box": report_dict(box_report),
    }
    if mask_report is not None:
        payload["mask"] = report_dict(mask_report)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="incdet", description="incremental toy-detector experiments"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and serialize a synthetic corpus")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run one experiment from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run all ablation presets on one corpus/seed")
    p.add_argument("config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code == 0 else 1
    try:
        return args.func(args)
    except (ConfigError, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ProtocolError, DetectorError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``her2cws <subcommand> [options]``.

Every subcommand prints one JSON summary object on stdout, writes its
artifacts plus an ``*.config.json`` effective-config file beside the main
output, and appends events to a JSONL log. Wall-clock times appear only in
the log's ``metadata`` field.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .calibrate import CalibrationOptions, LogitsMatrix, optimize_alpha
from .cohort import SCHEMA_VERSION, pack, read_cohort, read_labels, write_cohort, write_labels
from .evaluation import (
    confusion,
    fraction_kde,
    macro_f1,
    rater_agreement,
    write_confusion_csv,
    write_kde_json,
    write_metrics_csv,
)
from .guidelines import N_CLASSES, score_fractions
from .model import ClassifierParams, forward
from .synth import CohortSpec, discordance_matrix, generate_cohort, simulate_raters, split_cohort
from .trainer import TrainConfig, filter_patches, pretrain, slide_fractions, train_weak

# key -> (default, help); nested tables mirror the YAML layout
CONFIG_SCHEMA = {
    "seed": (None, "integer seed; required by generate, pretrain and train-weak"),
    "workers": (1, "worker count; computations are sequential and ordered, so results never depend on it"),
    "min_tumor_fraction": (0.1, "patches with tumor fraction <= this are dropped before training and scoring"),
    "cohort": {
        "slide_counts": ([50, 50, 50, 50], "slides per declared class 0..3"),
        "patches_per_slide": ([30, 60], "inclusive patch count range"),
        "n_features": (8, "feature dimension"),
        "separation": (4.0, "pairwise class-mean distance in units of feature_sigma"),
        "feature_sigma": (1.0, "isotropic feature noise"),
        "profiles": (None, "4x4 Dirichlet parameters over patch classes per declared class (null = built-in)"),
        "tumor_fraction_range": ([0.15, 1.0], "uniform range of raw patch tumor fractions"),
        "heterogeneous_rate": (0.0, "share of class 0/1 slides carrying a sub-10% class two levels higher"),
        "rater_discordance": (None, "adjacent-class rater discordance rate; enables rater label files"),
        "n_raters": (2, "number of noisy raters when rater_discordance is set"),
        "corrupt_labels": (False, "draw slide labels through the rater noise"),
        "split": ([0.8, 0.1, 0.1], "train/validation/test ratios, stratified by label"),
    },
    "pretrain": {
        "epochs": (100, "maximum pretraining epochs (0 writes the initialization)"),
        "patience": (20, "early stopping patience on validation patch accuracy"),
        "learning_rate": (0.01, "SGD learning rate"),
        "momentum": (0.9, "Nesterov momentum"),
        "batch_size": (512, "minibatch size"),
        "init_scale": (0.01, "std of the random weight initialization"),
    },
    "weak": {
        "epochs": (50, "maximum constrained epochs"),
        "patience": (5, "stop after this many consecutive violation-free epochs"),
        "learning_rate": (2.0, "SGD learning rate"),
        "momentum": (0.9, "Nesterov momentum (buffers reset every epoch by default)"),
        "batch_size": (512, "gradient divisor under sum reduction"),
        "steps_per_epoch": (1, "updates per epoch on the selected set"),
        "reduction": ("sum", "sum | mean: loss reduction over selected patches"),
        "lr_schedule": ("constant", "constant | cosine"),
        "reset_momentum_each_epoch": (True, "zero momentum buffers at each epoch start"),
    },
    "calibrate": {
        "method": ("nelder-mead", "nelder-mead | smoothed"),
        "max_evals": (500, "objective evaluations per simplex run"),
        "xatol": (1e-4, "simplex diameter stopping tolerance"),
        "restarts": (4, "coordinate-perturbed restarts"),
        "restart_step": (0.5, "perturbation size of restarts"),
        "initial_step": (0.25, "initial simplex edge length"),
        "positive": (False, "restrict alpha > 0 through exp reparameterization"),
        "temperature": (1.0, "softmax temperature of the smoothed mode"),
    },
    "report": {
        "bandwidth": (None, "KDE bandwidth (null = Silverman per cell, floor 0.01)"),
    },
}


class ValidationError(ValueError):
    pass


def _defaults(schema):
    return {k: (_defaults(v) if isinstance(v, dict) else copy.deepcopy(v[0])) for k, v in schema.items()}


def _merge(base, override, schema, prefix=""):
    for k, v in override.items():
        key = prefix + k
        if k not in schema:
            raise ValidationError(f"unknown config key {key!r}")
        if isinstance(schema[k], dict):
            if not isinstance(v, dict):
                raise ValidationError(f"config key {key!r} must be a table")
            _merge(base[k], v, schema[k], key + ".")
        else:
            base[k] = v
    return base


def load_config(path=None, seed=None) -> dict:
    cfg = _defaults(CONFIG_SCHEMA)
    if path is not None:
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ValidationError(f"config is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError("config root must be a mapping")
        raw.pop("schema_version", None)
        _merge(cfg, raw, CONFIG_SCHEMA)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _schema_help(schema=CONFIG_SCHEMA, prefix=""):
    lines = []
    for k, v in schema.items():
        if isinstance(v, dict):
            lines.extend(_schema_help(v, prefix + k + "."))
        else:
            lines.append(f"  {prefix + k} (default {json.dumps(v[0])}): {v[1]}")
    return lines


def _require_seed(cfg):
    if cfg["seed"] is None:
        raise ValidationError("a seed is required (config key 'seed' or --seed)")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ValidationError("seed must be an integer")
    return cfg["seed"]


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar(out: Path, suffix: str) -> Path:
    base = out / "run" if out.is_dir() else out.with_suffix("")
    return base.with_name(base.name + suffix)


class EventLog:
    """JSONL events; timestamps live only under ``metadata``."""

    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "a")

    def emit(self, event, **data):
        rec = {"schema_version": SCHEMA_VERSION, "event": event, "data": data, "metadata": {"time": time.time()}}
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _save_params(params, path, **extra):
    _dump({"schema_version": SCHEMA_VERSION, **params.to_dict(), **extra}, path)


def _load_params(path) -> ClassifierParams:
    with open(path) as fh:
        d = json.load(fh)
    try:
        return ClassifierParams.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed checkpoint ({exc})") from exc


def _load_alpha(path):
    if path is None:
        return np.ones(N_CLASSES)
    with open(path) as fh:
        d = json.load(fh)
    a = np.asarray(d.get("alpha"), dtype=float)
    if a.shape != (N_CLASSES,) or not np.all(np.isfinite(a)):
        raise ValidationError(f"{path}: alpha must be 4 finite numbers")
    return a


def _train_config(cfg, stage):
    return TrainConfig.for_stage(stage, seed=cfg["seed"], min_tumor_fraction=cfg["min_tumor_fraction"], **cfg[stage])


def _cohort(path, cfg):
    return filter_patches(read_cohort(path), cfg["min_tumor_fraction"])


def _check_features(packed, params, path):
    if packed.features.shape[1] != params.n_features:
        raise ValidationError(
            f"{path}: {packed.features.shape[1]} features but checkpoint expects {params.n_features}"
        )


# subcommands -----------------------------------------------------------


def cmd_generate(args, cfg, log):
    seed = _require_seed(cfg)
    c = dict(cfg["cohort"])
    noise = None if c["rater_discordance"] is None else discordance_matrix(c["rater_discordance"]).tolist()
    kw = dict(
        slide_counts=tuple(c["slide_counts"]),
        patches_per_slide=tuple(c["patches_per_slide"]),
        n_features=c["n_features"],
        separation=c["separation"],
        feature_sigma=c["feature_sigma"],
        tumor_fraction_range=tuple(c["tumor_fraction_range"]),
        heterogeneous_rate=c["heterogeneous_rate"],
        rater_noise=noise,
        corrupt_labels=c["corrupt_labels"],
        seed=seed,
    )
    if c["profiles"] is not None:
        kw["profiles"] = tuple(map(tuple, c["profiles"]))
    slides = generate_cohort(CohortSpec(**kw))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cohort(slides, out / "cohort.jsonl")
    parts = split_cohort(slides, c["split"], seed)
    for name, part in zip(("train", "val", "test"), parts):
        write_cohort(part, out / f"{name}.jsonl")
    raters = []
    if noise is not None:
        for name, labels in simulate_raters(slides, noise, c["n_raters"], seed).items():
            write_labels(sorted(labels.items()), out / f"labels_{name}.jsonl")
            raters.append(name)
    log.emit("generated", slides=len(slides), parts=[len(p) for p in parts], raters=raters)
    return {
        "slides": len(slides),
        "patches": sum(len(s.patches) for s in slides),
        "split": {"train": len(parts[0]), "val": len(parts[1]), "test": len(parts[2])},
        "raters": raters,
        "out": str(out),
    }


def cmd_pretrain(args, cfg, log):
    _require_seed(cfg)
    train = pack(_cohort(args.train, cfg))
    val = pack(_cohort(args.val, cfg)) if args.val else None
    config = _train_config(cfg, "pretrain")
    params = pretrain(train, config, val)
    _save_params(params, args.out)
    ref = val or train
    acc = float(np.mean(forward(params, ref.features)[2] == ref.patch_labels()))
    log.emit("pretrained", epochs=config.epochs, val_patch_accuracy=acc)
    return {"checkpoint": str(args.out), "valPatchAccuracy": acc}


def cmd_train_weak(args, cfg, log):
    _require_seed(cfg)
    train = pack(_cohort(args.train, cfg))
    val = pack(_cohort(args.val, cfg)) if args.val else None
    init = _load_params(args.init)
    _check_features(train, init, args.train)
    config = _train_config(cfg, "weak")

    def on_epoch(rep):
        log.emit(
            "weak_epoch",
            epoch=rep.epoch,
            n_upper=rep.n_upper,
            n_lower=rep.n_lower,
            upper_loss=rep.upper_loss,
            lower_loss=rep.lower_loss,
            satisfaction_rate=rep.satisfaction_rate,
            val_macro_f1=rep.val_macro_f1,
        )

    best, reports = train_weak(train, init, config, validation=val, on_epoch=on_epoch)
    _save_params(best, args.out)
    if args.epoch_reports:
        with open(args.epoch_reports, "w") as fh:
            for rep in reports:
                fh.write(json.dumps({"schema_version": SCHEMA_VERSION, **rep.to_dict()}) + "\n")
    last = reports[-1] if reports else None
    return {
        "checkpoint": str(args.out),
        "epochs": len(reports),
        "finalSatisfactionRate": last.satisfaction_rate if last else None,
        "bestValMacroF1": max((r.val_macro_f1 for r in reports), default=None),
    }


def cmd_dump_logits(args, cfg, log):
    packed = pack(_cohort(args.cohort, cfg))
    params = _load_params(args.params)
    _check_features(packed, params, args.cohort)
    logits = forward(params, packed.features)[0]
    labels = packed.patch_labels()
    sidx = packed.slide_index
    with open(args.out, "w") as fh:
        for r in range(len(logits)):
            rec = {
                "schema_version": SCHEMA_VERSION,
                "slide": packed.slide_ids[sidx[r]],
                "patch": packed.patch_ids[r],
                "logits": logits[r].tolist(),
                "weight": float(packed.weights[r]),
                "label": int(labels[r]),
            }
            fh.write(json.dumps(rec) + "\n")
    log.emit("dumped_logits", rows=len(logits))
    return {"rows": int(len(logits)), "slides": packed.n_slides, "out": str(args.out)}


def read_logits(path):
    """Rebuild a :class:`LogitsMatrix` and slide labels from a logits dump."""
    slides, labels, rows, sidx, weights = {}, [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                sid, lab = str(d["slide"]), int(d["label"])
                rows.append([float(x) for x in d["logits"]])
                w = float(d["weight"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed logits record ({exc})") from exc
            if sid not in slides:
                slides[sid] = len(slides)
                labels.append(lab)
            elif labels[slides[sid]] != lab:
                raise ValidationError(f"{path}:{lineno}: slide {sid} has conflicting labels")
            sidx.append(slides[sid])
            weights.append(w)
    if not rows:
        raise ValidationError(f"{path}: no logits records")
    return LogitsMatrix(np.array(rows), np.array(sidx), np.array(weights), len(slides)), np.array(labels), list(slides)


def cmd_calibrate(args, cfg, log):
    M, labels, _ = read_logits(args.logits)
    opts = CalibrationOptions(**cfg["calibrate"])
    res = optimize_alpha(M, labels, options=opts)
    _dump({"schema_version": SCHEMA_VERSION, **res.to_dict()}, args.out)
    log.emit("calibrated", evaluations=len(res.trace), fell_back=res.fell_back, **res.to_dict())
    return {**res.to_dict(), "out": str(args.out)}


def _predict(packed, params, alpha):
    logits = forward(params, packed.features)[0]
    return np.argmax(logits * alpha, axis=1)


def cmd_score(args, cfg, log):
    packed = pack(_cohort(args.cohort, cfg))
    params = _load_params(args.params)
    _check_features(packed, params, args.cohort)
    V = slide_fractions(packed, _predict(packed, params, _load_alpha(args.alpha)))
    n_het = 0
    with open(args.out, "w") as fh:
        for sid, v in zip(packed.slide_ids, V):
            verdict = score_fractions(v)
            n_het += verdict.heterogeneous
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "slide": sid, **verdict.to_dict()}) + "\n")
    log.emit("scored", slides=packed.n_slides, heterogeneous=n_het)
    return {"slides": packed.n_slides, "heterogeneous": n_het, "out": str(args.out)}


def cmd_report(args, cfg, log):
    slides = _cohort(args.cohort, cfg)
    packed = pack(slides)
    has_truth = all(p.true_class is not None for s in slides for p in s.patches)
    truth = pack(slides, with_truth=True).true_classes if has_truth else None
    stages = []
    if args.pretrained:
        stages.append(("pretrain", _load_params(args.pretrained), np.ones(N_CLASSES)))
    if args.params:
        params = _load_params(args.params)
        stages.append(("weak", params, np.ones(N_CLASSES)))
        if args.alpha:
            stages.append(("calibrated", params, _load_alpha(args.alpha)))
    if not stages:
        raise ValidationError("report needs --params and/or --pretrained")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, summary = [], {}
    final_V = None
    for name, p, alpha in stages:
        _check_features(packed, p, args.cohort)
        pred = _predict(packed, p, alpha)
        V = slide_fractions(packed, pred)
        scores = np.array([score_fractions(v).principal for v in V])
        cm = confusion(packed.labels, scores)
        write_confusion_csv(cm, out / f"confusion_slide_{name}.csv")
        row = {
            "stage": name,
            "slides": packed.n_slides,
            "macroF1": macro_f1(cm),
            "macroF1Strict": macro_f1(cm, "strict"),
            "slideAccuracy": float(np.trace(cm) / cm.sum()),
        }
        if truth is not None:
            pcm = confusion(truth, pred)
            write_confusion_csv(pcm, out / f"confusion_patch_{name}.csv")
            row["patchAccuracy"] = float(np.trace(pcm) / pcm.sum())
            row["patchMacroF1"] = macro_f1(pcm)
        rows.append(row)
        summary[name] = {k: v for k, v in row.items() if k != "stage"}
        final_V = (V, scores)
    write_metrics_csv(rows, out / "metrics.csv")
    V, scores = final_V
    write_kde_json(fraction_kde(V, scores, cfg["report"]["bandwidth"]), out / "kde.json")
    log.emit("reported", stages=[s[0] for s in stages])
    return {"stages": summary, "out": str(out)}


def cmd_agreement(args, cfg, log):
    sets = {}
    for path in args.labels:
        name = Path(path).stem.removeprefix("labels_")
        if name in sets:
            raise ValidationError(f"duplicate rater name {name!r}")
        sets[name] = read_labels(path)
    pairs = rater_agreement(sets)
    _dump({"schema_version": SCHEMA_VERSION, "pairs": pairs}, args.out)
    log.emit("agreement", raters=list(sets))
    return {
        "pairs": [{"raters": p["raters"], "n": p["n"], "agreement": p["agreement"]} for p in pairs],
        "out": str(args.out),
    }


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train-weak": cmd_train_weak,
    "dump-logits": cmd_dump_logits,
    "calibrate": cmd_calibrate,
    "score": cmd_score,
    "report": cmd_report,
    "agreement": cmd_agreement,
}


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (YAML file given with --config):\n" + "\n".join(_schema_help())
    parser = argparse.ArgumentParser(
        prog="her2cws",
        description="Constrained weakly supervised HER2 slide scoring on patch features.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file; unknown keys are errors")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--workers", type=int, help="overrides the config worker count")
    common.add_argument("--log", help="JSONL event log (default: beside the output)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(
            name, parents=[common], help=help_, epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter
        )

    p = add("generate", "write a synthetic cohort, its split and rater label files")
    p.add_argument("--out", required=True, help="output directory")
    p = add("pretrain", "train on slide labels")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="checkpoint JSON")
    p = add("train-weak", "constrained weakly supervised stage")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--init", required=True, help="starting checkpoint")
    p.add_argument("--out", required=True, help="checkpoint JSON")
    p.add_argument("--epoch-reports", help="optional JSONL with the full per-epoch reports")
    p = add("dump-logits", "write frozen patch logits")
    p.add_argument("--cohort", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p = add("calibrate", "fit per-class logit scales")
    p.add_argument("--logits", required=True)
    p.add_argument("--out", required=True)
    p = add("score", "per-slide guideline verdicts")
    p.add_argument("--cohort", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--alpha", help="calibration JSON")
    p.add_argument("--out", required=True)
    p = add("report", "confusion/metrics CSV and KDE tables")
    p.add_argument("--cohort", required=True)
    p.add_argument("--params", help="weak-stage checkpoint")
    p.add_argument("--pretrained", help="pretrain checkpoint")
    p.add_argument("--alpha", help="calibration JSON")
    p.add_argument("--out", required=True, help="output directory")
    p = add("agreement", "pairwise rater agreement")
    p.add_argument("--labels", nargs="+", required=True, help="two or more rater label files")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command
    log = None
    try:
        cfg = load_config(args.config, args.seed)
        if args.workers is not None:
            cfg["workers"] = args.workers
        if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
            raise ValidationError("workers must be a positive integer")
        out = Path(args.out)
        if stage in ("generate", "report"):
            out.mkdir(parents=True, exist_ok=True)
        _dump({"schema_version": SCHEMA_VERSION, "command": stage, **cfg}, _sidecar(out, ".config.json"))
        log = EventLog(args.log or _sidecar(out, ".log.jsonl"))
        log.emit("start", command=stage)
        summary = COMMANDS[stage](args, cfg, log)
        log.emit("done", command=stage)
    except OSError as exc:
        print(json.dumps({"stage": stage, "message": str(exc)}))
        return 2
    except (ValueError, FloatingPointError, KeyError) as exc:
        # ValidationError, cohort spec errors, malformed inputs and divergence
        print(json.dumps({"stage": stage, "message": str(exc)}))
        return 1
    finally:
        if log is not None:
            log.close()
    print(json.dumps({"schema_version": SCHEMA_VERSION, "command": stage, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

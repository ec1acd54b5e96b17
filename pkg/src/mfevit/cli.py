"""Command-line entry point.

Progress goes to stderr through ``logging``; each command finishes with one
JSON line on stdout. The exit status is 0 exactly when nothing was logged at
ERROR level.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, from_flat, load_config, parse_config_text
from .encoder import count_parameters, load_checkpoint
from .errors import ConfigError, MFEViTError
from .gradcheck import SIZES, check_gradients
from .harness import Dataset, cross_validate, evaluate, report_parameters, format_parameter_table, train_fold
from .pipeline import generate_synthetic, load_manifest

logger = logging.getLogger("mfevit")

RUN_DIR_ENV = "MFEVIT_RUN_DIR"
GRAD_TOLERANCE = 1e-4


class _ErrorCounter(logging.Handler):
    def __init__(self) -> None:
        super().__init__(level=logging.ERROR)
        self.count = 0

    def emit(self, record: logging.LogRecord) -> None:
        self.count += 1


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True), flush=True)


def _run_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = Path(os.environ.get(RUN_DIR_ENV, "runs"))
    return root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"


def _parse_sets(items: list[str]) -> dict[str, str]:
    out, bad = {}, []
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            bad.append(item)
        else:
            out[key.strip()] = value.strip()
    if bad:
        raise ConfigError("--set expects key=value, got: " + ", ".join(repr(b) for b in bad))
    return out


def _config(args, flag_overrides: dict[str, object] | None = None) -> ExperimentConfig:
    """Config file, then ``--set`` pairs, then dedicated flags (highest precedence)."""
    overrides: dict[str, object] = _parse_sets(getattr(args, "set", None))
    overrides.update({k: v for k, v in (flag_overrides or {}).items() if v is not None})
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    return from_flat(overrides)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> dict:
    manifest = generate_synthetic(args.out, args.subjects, args.per_class, seed=args.seed,
                                  noise_frac=args.noise_frac, image_size=args.image_size)
    noisy = sum(r.noisy for r in manifest.records)
    logger.info("wrote %d samples from %d subjects to %s", len(manifest.records),
                len(manifest.subjects()), args.out)
    return {"samples": len(manifest.records), "subjects": len(manifest.subjects()), "noisy": noisy,
            "manifest": str(Path(args.out) / "manifest.csv")}


def cmd_train(args) -> dict:
    cfg = _config(args, {"seed": args.seed, "epochs": args.epochs})
    run_dir = _run_dir(args, "train")
    manifest = load_manifest(args.manifest)
    data = Dataset.from_manifest(manifest, cfg.model.image_size)
    logger.info("training on %d samples, run directory %s", len(data), run_dir)
    result = train_fold(data, cfg, run_dir=run_dir)
    last = result.history[-1] if result.history else None
    noisy = data.noisy
    moved = np.array([result.states[s].is_subclass for s in data.sample_ids], dtype=bool)
    return {
        "run_dir": str(run_dir),
        "checkpoint": str(run_dir / "checkpoint.bin"),
        "epochs": cfg.train.epochs,
        "final_loss": None if last is None else last.loss,
        "train_accuracy": None if last is None else last.train_accuracy,
        "relabel_events": len(result.events),
        "in_subclass": int(moved.sum()),
        "noisy_in_subclass": int((moved & noisy).sum()),
    }


def cmd_eval(args) -> dict:
    params, model_cfg = load_checkpoint(args.checkpoint)
    if args.config or args.set:
        # file and --set values are layered over the checkpoint's own settings
        values: dict[str, object] = dict(asdict(model_cfg))
        if args.config:
            values.update(parse_config_text(Path(args.config).read_text()))
        values.update(_parse_sets(args.set))
        requested = from_flat(values).model
        if requested != model_cfg:
            raise ConfigError("model settings differ from the checkpoint; drop them or retrain")
    manifest = load_manifest(args.manifest)
    result = evaluate(params, manifest, model_cfg)
    logger.info("accuracy %.4f on %d samples\n%s", result.accuracy, len(result.truth),
                result.confusion.to_text().rstrip())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "confusion.csv").write_text(result.confusion.to_text())
    return {"accuracy": result.accuracy, "samples": int(len(result.truth)),
            "per_class_accuracy": result.confusion.per_class_accuracy().tolist()}


def cmd_cv(args) -> dict:
    cfg = _config(args, {"seed": args.seed, "epochs": args.epochs, "cv_folds": args.k,
                         "cv_repeats": args.repeats, "jobs": args.jobs})
    run_dir = _run_dir(args, "cv")
    tc = cfg.train
    manifest = load_manifest(args.manifest)
    logger.info("%d-fold cross-validation x%d over %d subjects", tc.cv_folds, tc.cv_repeats,
                len(manifest.subjects()))
    result = cross_validate(manifest, cfg, tc.cv_folds, tc.cv_repeats, tc.seed, tc.jobs, run_dir)
    return {"run_dir": str(run_dir), "mean_accuracy": result.mean, "std_accuracy": result.std,
            "splits": len(result.splits), "per_class_accuracy": result.per_class}


def cmd_params(args) -> dict:
    cfg = _config(args).model
    rows = report_parameters(cfg)
    count = count_parameters(cfg)
    logger.info("\n%s", format_parameter_table(rows))
    return {"total": count.total, "groups": count.groups, "fusion_mode": cfg.fusion_mode,
            "by_mode": {r.mode: r.total for r in rows}}


def cmd_check_grad(args) -> dict:
    t0 = time.perf_counter()
    reports = check_gradients(SIZES[args.size], seed=args.seed)
    worst = max(reports, key=lambda r: r.rel_error)
    seconds = time.perf_counter() - t0
    for r in reports:
        logger.debug("%-32s %8d  %.2e", r.name, r.size, r.rel_error)
    passed = worst.rel_error <= GRAD_TOLERANCE
    msg = "worst offender %s (%d values): relative error %.3e, tolerance %.0e"
    (logger.info if passed else logger.error)(msg, worst.name, worst.size, worst.rel_error, GRAD_TOLERANCE)
    return {"passed": passed, "worst": worst.name, "max_rel_error": worst.rel_error,
            "tensors": len(reports), "seconds": round(seconds, 2)}


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfevit", description="RGB-D expression ViT toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug-level progress output")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def with_config(p, required: bool) -> None:
        p.add_argument("--config", required=required, help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("synth", help="write the synthetic RGB-D dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--per-class", type=int, default=4, help="samples per expression per subject")
    p.add_argument("--noise-frac", type=float, default=0.0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on every sample of a manifest")
    with_config(p, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help=f"run directory (default: ${RUN_DIR_ENV} or ./runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="merged-subclass accuracy of a checkpoint")
    with_config(p, required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="directory for confusion.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="subject-disjoint K-fold cross-validation")
    with_config(p, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help=f"run directory (default: ${RUN_DIR_ENV} or ./runs)")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("params", help="parameter counts per fusion mode")
    with_config(p, required=False)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("check-grad", help="finite-difference check of every parameter gradient")
    p.add_argument("--size", choices=sorted(SIZES), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_grad)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s", "%H:%M:%S"))
    counter = _ErrorCounter()
    root = logging.getLogger()
    root.addHandler(handler)
    root.addHandler(counter)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        summary = {"command": args.command, **args.func(args)}
    except (MFEViTError, OSError, ValueError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        summary = {"command": args.command, "error": f"{type(exc).__name__}: {exc}"}
    finally:
        root.removeHandler(handler)
        root.removeHandler(counter)
    summary["status"] = "ok" if counter.count == 0 else "error"
    _emit(summary)
    return 0 if counter.count == 0 else 1


if __name__ == "__main__":
    sys.exit(main())

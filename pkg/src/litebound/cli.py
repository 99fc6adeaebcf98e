"""Batch command-line interface: synth, cache, train, eval, predict, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import data, featcache
from .config import ConfigError, RunConfig, apply_overrides
from .data import DatasetError, SynthSpec
from .inference import latest_checkpoint, load_checkpoint, predict_samples
from .metrics import MetricReport, evaluate, mean_band_dice
from .teachers import TeacherBank, TeacherError
from .trainer import TrainingError, precompute_cache, train

log = logging.getLogger("litebound")

OUT_ENV = "LITEBOUND_OUT"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise UsageError(f"no output directory: pass --out or set {OUT_ENV}")
    return Path(out)


def _config(args) -> RunConfig:
    if args.config:
        return RunConfig.load(args.config, args.set)
    return RunConfig.from_dict(apply_overrides({}, args.set))


def _samples(path: str, split: str):
    return data.load_dataset(path, split)


def _checkpoint(args, out: Path) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    ckpt = latest_checkpoint(out)
    if ckpt is None:
        raise TrainingError(f"no checkpoint under {out / 'checkpoints'}; run `train` first")
    return ckpt


def _to_png(prob: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(prob * 255.0 + 0.5), 0, 255).astype(np.uint8)


def overlay(image: np.ndarray, prob: np.ndarray) -> np.ndarray:
    """Draw the 0.5-level contour of ``prob`` in red on ``image``."""
    fg = prob >= 0.5
    contour = fg & ~ndimage.binary_erosion(fg, border_value=0)
    rgb = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    rgb[contour] = (255, 0, 0)
    return rgb


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            log.error("%s is not empty; pass --force to overwrite", out)
            return 1
        # only the layout written by this command is removed
        for name in ("train", "test"):
            if (out / name).is_dir():
                shutil.rmtree(out / name)
        (out / "provenance.json").unlink(missing_ok=True)
    synth = SynthSpec(
        count=args.count,
        canvas=args.canvas,
        boundary_noise=args.boundary_noise,
        contrast=args.contrast,
        seed=args.seed,
    )
    try:
        synth.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    splits = data.write_synthetic(out, synth, args.test_count)
    print(f"wrote {', '.join(f'{len(v)} {k}' for k, v in splits.items())} samples to {out}")
    return 0


def cmd_cache(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    samples = _samples(cfg.data.train, "train")
    bank = TeacherBank.from_names(cfg.teachers.bank)
    summary = precompute_cache(bank, samples, out / "cache", cfg.distill.width, cfg.distill.projection_seed)
    print(summary)
    return 1 if summary.failed else 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    samples = _samples(cfg.data.train, "train")
    distill = False if args.no_distill else None
    state = train(cfg, out, samples, distill=distill, start_phase=args.start_phase, phase1_only=args.phase1_only)
    print(f"finished phase {state.phase} at epoch {state.epoch}; checkpoint {state.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    samples = _samples(args.data or getattr(cfg.data, args.split), args.split)
    model, _ = load_checkpoint(_checkpoint(args, out))
    report, preds = evaluate(model, samples, cfg.eval.threshold)
    band = mean_band_dice(preds, [s.mask for s in samples], cfg.eval.band_width)
    report.write_csv(out / "eval" / "report.csv")
    text = report.summary(f"split: {args.split}") + f"boundary-band mDice: {100 * band:.1f}\n"
    (out / "eval" / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    samples = _samples(args.data or cfg.data.test, args.split)
    model, _ = load_checkpoint(_checkpoint(args, out))
    dest = out / "predict"
    dest.mkdir(parents=True, exist_ok=True)
    for s, prob in zip(samples, predict_samples(model, samples)):
        Image.fromarray(_to_png(prob)).save(dest / f"{s.id}.png")
        if args.overlay:
            Image.fromarray(overlay(s.image, prob)).save(dest / f"{s.id}_overlay.png")
    print(f"wrote {len(samples)} masks to {dest}")
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    path = Path(args.csv) if args.csv else out / "eval" / "report.csv"
    if not path.exists():
        raise TrainingError(f"{path} not found; run `eval` first")
    report = MetricReport.read_csv(path)
    text = report.summary(f"report: {path}")
    print(text, end="")
    return 0


# --------------------------------------------------------------------------- parser


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help=f"run directory (default: ${OUT_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="litebound", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic blob corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--test-count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=128)
    p.add_argument("--boundary-noise", type=float, default=2.0)
    p.add_argument("--contrast", type=float, default=0.5)
    p.add_argument("--force", action="store_true", help="overwrite an existing corpus")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cache", parents=[common], help="precompute teacher distillation targets")
    _add_run_args(p)
    p.set_defaults(func=cmd_cache)

    p = sub.add_parser("train", parents=[common], help="run the three-phase schedule")
    _add_run_args(p)
    p.add_argument("--no-distill", action="store_true", help="segmentation loss only in every phase")
    p.add_argument("--phase1-only", action="store_true", help="one segmentation phase over the whole schedule")
    p.add_argument("--start-phase", type=int, choices=(1, 2, 3), default=1)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("eval", cmd_eval, "score a checkpoint on a dataset split"),
        ("predict", cmd_predict, "write probability masks"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        _add_run_args(p)
        p.add_argument("--checkpoint", help="default: latest checkpoint in the run directory")
        p.add_argument("--data", help="dataset root (default: from the config)")
        p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "predict":
            p.add_argument("--overlay", action="store_true", help="also write red-contour overlays")
        p.set_defaults(func=func)

    p = sub.add_parser("report", parents=[common], help="print the summary of an evaluation CSV")
    p.add_argument("--out", help=f"run directory (default: ${OUT_ENV})")
    p.add_argument("--csv", help="per-sample report (default: <out>/eval/report.csv)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (
        TrainingError,
        DatasetError,
        TeacherError,
        featcache.CacheFormatError,
        featcache.StaleCacheError,
        FileNotFoundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

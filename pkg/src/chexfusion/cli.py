"""Command-line entry point: ``chexfusion {train,evaluate,predict,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage/config/validation error.
Diagnostics go to stderr, results to stdout.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import nn
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .data import GENDERS, PATHOLOGIES, VIEWS, ManifestRecord, build_dataset, encode_metadata, load_image, read_manifest, split_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    CorruptCheckpointError,
    GradCheckError,
    ImageLoadError,
    OptimizerError,
    SplitError,
    TrainingError,
    UnsupportedVersionError,
    ValidationError,
)
from .evaluation import compare_baseline, evaluate_model, render_report
from .training import fit

log = logging.getLogger("chexfusion")

GRADCHECK_THRESHOLD = 1e-4


class UsageError(Exception):
    pass


def _manifest(path):
    try:
        return read_manifest(path)
    except FileNotFoundError:
        raise UsageError(f"manifest not found: {path}") from None


def _checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _model_from_checkpoint(ckpt):
    cfg = config_mod.from_echo(ckpt.config)
    model = config_mod.build_model_from_config(cfg)
    load_into(model, ckpt)
    return cfg, model


def cmd_train(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(("train.seed", args.seed))
    cfg = config_mod.resolve_config(args.config, overrides)
    records = _manifest(args.manifest)
    split = split_dataset(records, config_mod.split_ratios(cfg), cfg["train.seed"])
    size, workers = cfg["data.image_size"], cfg["data.workers"]
    train = build_dataset([records[i] for i in split.train], args.images_dir, size, workers)
    val = build_dataset([records[i] for i in split.val], args.images_dir, size, workers)
    log.info("split: %d train / %d val / %d test records", len(split.train), len(split.val), len(split.test))

    model = config_mod.build_model_from_config(cfg)
    tcfg = config_mod.train_config(cfg)

    def report(rec):
        log.info("epoch %d  train %.5f  val %.5f  lr %.1e  %.1fs", rec.epoch, rec.train_loss, rec.val_loss, rec.lr, rec.seconds)

    result = fit(model, train, val, tcfg, config_echo=cfg, on_epoch=report)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best if result.best is not None else result.last, out / "best.ckpt")
    save_checkpoint(result.last, out / "last.ckpt")
    (out / "trainlog.csv").write_text(result.log.to_csv(), encoding="utf-8")
    log.info("wrote %s", out)
    return 0


def cmd_evaluate(args):
    ckpt = _checkpoint(args.checkpoint)
    cfg, model = _model_from_checkpoint(ckpt)
    records = _manifest(args.manifest)
    split = split_dataset(records, config_mod.split_ratios(cfg), cfg["train.seed"])
    chosen = [records[i] for i in split[args.split]]
    if not chosen:
        raise UsageError(f"split {args.split!r} is empty")
    dataset = build_dataset(chosen, args.images_dir, cfg["data.image_size"], cfg["data.workers"])
    report = evaluate_model(model, dataset, args.split)
    for name in report.undefined:
        log.warning("%s: AUROC undefined on %s split (single class)", name, args.split)
    sys.stdout.write(render_report(report, compare_baseline(report), args.format))
    return 0


def _metadata_from_flags(args):
    if not 0 <= args.age <= 120:
        raise UsageError(f"--age must be in [0, 120], got {args.age}")
    if args.followup < 0:
        raise UsageError(f"--followup must be >= 0, got {args.followup}")
    rec = ManifestRecord(Path(args.image).name, "No Finding", args.followup, "", args.age, args.gender, args.view)
    return encode_metadata(rec)


def cmd_predict(args):
    meta = _metadata_from_flags(args)
    ckpt = _checkpoint(args.checkpoint)
    cfg, model = _model_from_checkpoint(ckpt)
    image = load_image(args.image, cfg["data.image_size"])
    logits = model.forward(image[None], meta[None], training=False)
    probs = nn.sigmoid(logits)[0]
    for name, p in zip(PATHOLOGIES, probs):
        print(f"{name} {float(p):.8f}")
    return 0


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    reports = run_suite(args.variant, seed=args.seed)
    width = max(len(r.op_name) for r in reports)
    print(f"{'op':<{width}}  {'max_rel_error':>13}  {'points':>6}  status")
    failing = []
    for r in reports:
        ok = r.max_rel_error < GRADCHECK_THRESHOLD
        if not ok:
            failing.append(r.op_name)
        print(f"{r.op_name:<{width}}  {r.max_rel_error:13.3e}  {r.tested_points:6d}  {'ok' if ok else 'FAIL'}")
    if failing:
        log.error("gradient check failed for: %s", ", ".join(failing))
        return 1
    return 0


def _gender(text):
    value = text.strip().upper()
    if value not in GENDERS:
        raise argparse.ArgumentTypeError(f"must be one of {', '.join(GENDERS)}")
    return value


def _view(text):
    value = text.strip().upper()
    if value not in VIEWS:
        raise argparse.ArgumentTypeError(f"must be one of {', '.join(VIEWS)}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="chexfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a manifest and write checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-pathology AUROC on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="class probabilities for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--age", type=int, required=True)
    p.add_argument("--gender", type=_gender, required=True)
    p.add_argument("--view", type=_view, required=True)
    p.add_argument("--followup", type=int, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--variant", choices=("tiny",), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


_USAGE_ERRORS = (UsageError, ConfigError, ValidationError, SplitError, ImageLoadError)
_RUNTIME_ERRORS = (TrainingError, OptimizerError, CorruptCheckpointError, UnsupportedVersionError, GradCheckError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False
    try:
        return args.func(args)
    except _RUNTIME_ERRORS as exc:
        log.error("%s", exc)
        return 1
    except (*_USAGE_ERRORS, CheckpointError) as exc:
        for line in getattr(exc, "errors", None) or [str(exc)]:
            log.error("%s", line)
        return 2


if __name__ == "__main__":
    sys.exit(main())

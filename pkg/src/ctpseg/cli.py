"""``ctpseg`` command line: phantom generation, training, cross-validation, prediction and evaluation.

Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid arguments or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .data import FoldPlan, ScanStack, folds_for_dataset, read_dataset, read_manifest, split_scans, synth_generate, write_dataset
from .errors import ConfigInvalid, CtpSegError, ShapeMismatch
from .losses import estimate_w
from .metrics import evaluate_scan, write_metrics_csv, write_report_md
from .models import build_model, load_checkpoint, read_checkpoint
from .training import ensemble_predict, fine_tune_two_phase, predict_mask, train

logger = logging.getLogger("ctpseg")


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 2."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _resolve(args) -> C.Experiment:
    overrides = {
        "run_dir": getattr(args, "run_dir", None),
        "seed": getattr(args, "seed", None),
        "data.root": getattr(args, "data", None),
        "data.folds": getattr(args, "folds", None),
        "data.fold": getattr(args, "fold", None),
        "model.arch": getattr(args, "arch", None),
        "train.max_epochs": getattr(args, "epochs", None),
    }
    raw = C.load_config(getattr(args, "config", None), overrides)
    return C.experiment_from_config(raw)


def _dataset(exp: C.Experiment) -> list[ScanStack]:
    d = exp.raw["data"]
    if d["root"] is not None:
        scans = read_dataset(d["root"])
    else:
        scans = synth_generate(int(d["synth_subjects"]), tuple(d["synth_size"]), seed=exp.seed)
    expected = tuple(exp.model_config.input_size)
    for s in scans:
        if tuple(s.shape[1:]) != expected:
            raise UsageError(f"scan {s.scan_id} has {s.shape[1:]} slices but the model expects {expected}")
    return scans


def _fold_plan(exp: C.Experiment, scans) -> FoldPlan:
    return folds_for_dataset(scans, int(exp.raw["data"]["folds"]), seed=exp.seed)


def _train_config(exp: C.Experiment, train_scans):
    cfg = exp.train
    if cfg.loss.kind == "wce" and exp.estimate_w:
        cfg = replace(cfg, loss=replace(cfg.loss, w=estimate_w(s.mask for s in train_scans)))
    return cfg


def _start_run(exp: C.Experiment) -> Path:
    run = exp.run_dir
    run.mkdir(parents=True, exist_ok=True)
    C.write_config(exp.raw, run / "config.json")
    return run


def _spacing(exp: C.Experiment, scan: ScanStack):
    sp = exp.raw["metrics"]["spacing"]
    return tuple(sp) if sp is not None else tuple(scan.spacing)


def _write_mask(mask: np.ndarray, scan: ScanStack, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "mask.raw").write_bytes(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    meta = {"scan_id": scan.scan_id, "subject_id": scan.subject_id, "shape": list(mask.shape),
            "spacing": list(scan.spacing)}
    (directory / "prediction.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def _write_manifest(scans, out: Path) -> None:
    lines = ["subject_id,scan_id,path"] + [f"{s.subject_id},{s.scan_id},{s.scan_id}" for s in scans]
    (out / "manifest.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _overlay(scan: ScanStack, pred: np.ndarray, directory: Path) -> None:
    """One PNG per slice: CBF in grey, reference in green, prediction in red (overlap yellow)."""
    from PIL import Image

    cbf = scan.channels[1]
    lo, hi = float(cbf.min()), float(cbf.max())
    grey = ((cbf - lo) / (hi - lo if hi > lo else 1.0) * 255).astype(np.uint8)
    for z in range(scan.depth):
        rgb = np.repeat(grey[z][..., None], 3, axis=2).astype(np.float32)
        truth, p = scan.mask[z].astype(bool), pred[z].astype(bool)
        rgb[truth] = 0.5 * rgb[truth] + 0.5 * np.array([0, 255, 0])
        rgb[p] = 0.5 * rgb[p] + 0.5 * np.array([255, 0, 0])
        rgb[truth & p] = np.array([255, 255, 0])
        Image.fromarray(rgb.astype(np.uint8)).save(directory / f"overlay_z{z:02d}.png")


def _load_models(paths):
    models = []
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"checkpoint not found: {p}")
        models.append(load_checkpoint(p))
    return models


def _predict_all(scans, predict, out: Path, png: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for scan in scans:
        mask = predict(scan)
        _write_mask(mask, scan, out / scan.scan_id)
        if png:
            _overlay(scan, mask, out / scan.scan_id)
    _write_manifest(scans, out)


def _read_masks(directory) -> dict:
    """scan_id -> mask for a prediction directory or a dataset directory."""
    directory = Path(directory)
    out = {}
    for row in read_manifest(directory):
        d = Path(row["path"])
        meta_path = d / "prediction.json" if (d / "prediction.json").exists() else d / "meta.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        shape = tuple(meta["shape"])
        raw = (d / "mask.raw").read_bytes()
        if len(raw) != int(np.prod(shape)):
            raise ShapeMismatch(f"{d / 'mask.raw'} holds {len(raw)} bytes, expected {int(np.prod(shape))}")
        out[row["scan_id"]] = (np.frombuffer(raw, np.uint8).reshape(shape), tuple(meta["spacing"]))
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.subjects < 1:
        raise UsageError("--subjects must be at least 1")
    if min(args.size) < 1:
        raise UsageError("--size values must be positive")
    scans = synth_generate(args.subjects, tuple(args.size), seed=args.seed)
    write_dataset(scans, args.out)
    print(f"wrote {len(scans)} scans from {args.subjects} subjects to {args.out}")
    return 0


def cmd_train(args) -> int:
    exp = _resolve(args)
    scans = _dataset(exp)
    plan = _fold_plan(exp, scans)
    fold = int(exp.raw["data"]["fold"])
    run = _start_run(exp)
    (run / "folds.json").write_text(json.dumps(plan.to_dict(), indent=2), encoding="utf-8")
    cfg = _train_config(exp, split_scans(scans, plan, fold, "train"))
    model = build_model(exp.arch, exp.model_config, seed=exp.seed)
    result = train(cfg, model, scans, plan, fold, run, exp.augment)
    print(f"fold {fold}: best val DSC {result.best.best_dsc:.4f} at epoch {result.best.epoch}; "
          f"{len(result.log)} epochs; checkpoints in {run}")
    return 0


def cmd_finetune(args) -> int:
    exp = _resolve(args)
    if not Path(args.pretrained).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.pretrained}")
    pretrained = read_checkpoint(args.pretrained)
    scans = _dataset(exp)
    plan = _fold_plan(exp, scans)
    fold = int(exp.raw["data"]["fold"])
    run = _start_run(exp)
    cfg = _train_config(exp, split_scans(scans, plan, fold, "train"))
    cfg = replace(cfg, fine_tune=replace(cfg.fine_tune, pretrained=str(args.pretrained)))
    model = build_model(exp.arch, exp.model_config, seed=exp.seed)
    res = fine_tune_two_phase(cfg, model, pretrained, scans, plan, fold, run, exp.augment)
    print(f"phase 1: best val DSC {res.phase1.best.best_dsc:.4f}; "
          f"phase 2: best val DSC {res.phase2.best.best_dsc:.4f}; checkpoints in {run}")
    return 0


def cmd_cv(args) -> int:
    exp = _resolve(args)
    scans = _dataset(exp)
    plan = _fold_plan(exp, scans)
    run = _start_run(exp)
    (run / "folds.json").write_text(json.dumps(plan.to_dict(), indent=2), encoding="utf-8")
    records, failed = [], []
    for fold in range(plan.k):
        fold_dir = run / f"fold{fold}"
        try:
            train_scans = split_scans(scans, plan, fold, "train")
            cfg = _train_config(exp, train_scans)
            model = build_model(exp.arch, exp.model_config, seed=exp.seed + fold)
            result = train(cfg, model, scans, plan, fold, fold_dir, exp.augment)
            fold_records = [
                evaluate_scan(predict_mask(model, s), s.mask, _spacing(exp, s), s.scan_id, fold)
                for s in split_scans(scans, plan, fold, "val")
            ]
            write_metrics_csv(fold_records, fold_dir / "metrics.csv")
            records += fold_records
            print(f"fold {fold}: best val DSC {result.best.best_dsc:.4f} at epoch {result.best.epoch}")
        except CtpSegError as e:
            logger.error("fold %d failed: %s", fold, e)
            failed.append(fold)
    if records:
        write_metrics_csv(records, run / "metrics.csv")
        write_report_md(run / "report.md", records)
        print(f"report written to {run / 'report.md'}")
    if failed:
        print(f"folds failed: {failed}", file=sys.stderr)
        return 1
    return 0


def cmd_predict(args) -> int:
    model = _load_models([args.checkpoint])[0]
    scans = read_dataset(args.data)
    _predict_all(scans, lambda s: predict_mask(model, s), Path(args.out), args.png)
    print(f"wrote {len(scans)} predicted masks to {args.out}")
    return 0


def cmd_ensemble(args) -> int:
    models = _load_models(args.checkpoints)
    scans = read_dataset(args.data)
    _predict_all(scans, lambda s: ensemble_predict(models, s, args.rule), Path(args.out), args.png)
    print(f"wrote {len(scans)} masks from a {len(models)}-model ensemble to {args.out}")
    return 0


def cmd_eval(args) -> int:
    preds, truths = _read_masks(args.pred), _read_masks(args.truth)
    missing = sorted(set(truths) - set(preds))
    if missing:
        raise FileNotFoundError(f"no prediction for scans {missing[:5]} in {args.pred}")
    spacing = tuple(args.spacing) if args.spacing else None
    records = [evaluate_scan(preds[sid][0], mask, spacing or sp, sid) for sid, (mask, sp) in truths.items()]
    out = Path(args.out) if args.out else Path("metrics.csv")
    write_metrics_csv(records, out)
    mean = float(np.mean([r.dsc for r in records]))
    print(f"evaluated {len(records)} scans, mean DSC {mean:.4f}; wrote {out}")
    return 0


def cmd_config_ref(args) -> int:
    text = C.reference_markdown()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", help="dataset directory (overrides data.root)")
    p.add_argument("--run-dir", dest="run_dir", help="output directory (overrides run_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=["pspnet", "unet2d"])
    p.add_argument("--epochs", type=int, help="overrides train.max_epochs")
    p.add_argument("--folds", type=int, help="overrides data.folds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctpseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on one fold")
    _experiment_flags(p)
    p.add_argument("--fold", type=int, help="held-out fold (overrides data.fold)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="two-phase fine-tuning from a pretrained checkpoint")
    _experiment_flags(p)
    p.add_argument("--fold", type=int)
    p.add_argument("--pretrained", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("cv", help="k-fold cross-validation with per-fold and combined reports")
    _experiment_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", help="write predicted masks for every scan of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also write per-slice overlay images")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="combine several checkpoints into one prediction")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rule", choices=["mean", "vote"], default="mean")
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="metrics.csv comparing predicted and reference masks")
    p.add_argument("--pred", required=True, help="prediction or dataset directory with manifest.csv")
    p.add_argument("--truth", required=True, help="dataset directory with manifest.csv")
    p.add_argument("--out", help="output CSV (default: ./metrics.csv)")
    p.add_argument("--spacing", type=float, nargs=3, metavar=("SX", "SY", "SZ"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("config-ref", help="print the config reference page")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config_ref)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigInvalid) as e:
        print(f"ctpseg: error: {e}", file=sys.stderr)
        return 2
    except (OSError, CtpSegError, ValueError) as e:
        print(f"ctpseg: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

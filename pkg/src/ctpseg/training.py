"""RMSProp training with plateau LR decay, early stopping, fine-tuning and ensembling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .data import AugmentParams, FoldPlan, ScanStack, SliceBatch, iter_batches, split_scans
from .errors import (
    CorruptFile,
    EmptyEnsemble,
    EmptySplit,
    HeterogeneousInputs,
    IncompatibleCheckpoint,
    NonFiniteGradient,
    NonFiniteLoss,
    ShapeMismatch,
)
from .kernels import softmax
from .losses import LossConfig, compute_loss, foreground_probability
from .metrics import dsc
from .models import Checkpoint, SegmentationModel, apply_state, checkpoint_from_model, set_trainable, write_checkpoint

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_dsc", "lr")


@dataclass
class FineTuneConfig:
    pretrained: str | None = None
    phase1_lr: float = 1e-2
    phase2_lr: float = 1e-4
    phase1_epochs: int = 10


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 200
    plateau_epochs: int = 20
    lr_reduce_factor: float = 10.0
    early_stop_patience: int = 50
    seed: int = 0
    rmsprop_alpha: float = 0.9
    rmsprop_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    fine_tune: FineTuneConfig | None = None

    def validate(self) -> None:
        if self.plateau_epochs >= self.early_stop_patience:
            raise ValueError("plateau_epochs must be smaller than early_stop_patience")
        if self.initial_lr <= 0 or self.lr_reduce_factor <= 0:
            raise ValueError("learning rate and reduction factor must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        self.loss.validate()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class RmspropState:
    lr: float
    alpha: float = 0.9
    eps: float = 1e-8
    acc: dict = field(default_factory=dict)  # parameter name -> squared-gradient average


def rmsprop_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: RmspropState) -> None:
    """In-place RMSProp update of every parameter that has a gradient.

    acc <- alpha * acc + (1 - alpha) * g^2;  p <- p - lr * g / (sqrt(acc) + eps)
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient of {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        acc = state.acc.get(name)
        if acc is None:
            acc = state.acc[name] = np.zeros_like(p.data)
        acc *= state.alpha
        acc += (1.0 - state.alpha) * g * g
        p.data -= (state.lr * g / (np.sqrt(acc) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass
class ScheduleState:
    lr: float
    best: float = -math.inf
    since_improvement: int = 0
    stop: bool = False
    improved: bool = False
    lr_history: list = field(default_factory=list)


def schedule_update(state: ScheduleState, val_dsc: float, cfg: TrainConfig) -> str:
    """Advance the plateau/early-stop state machine by one epoch.

    Returns ``"continue"``, ``"reduce_lr"`` or ``"stop"``. Only a strict
    improvement over the best score resets the stagnation counter.
    """
    if val_dsc > state.best:
        state.best = val_dsc
        state.since_improvement = 0
        state.improved = True
        action = "continue"
    else:
        state.improved = False
        state.since_improvement += 1
        if state.since_improvement >= cfg.early_stop_patience:
            state.stop = True
            action = "stop"
        elif state.since_improvement % cfg.plateau_epochs == 0:
            state.lr /= cfg.lr_reduce_factor
            action = "reduce_lr"
        else:
            action = "continue"
    state.lr_history.append(state.lr)
    return action


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def _check_input(model: SegmentationModel, scan: ScanStack) -> None:
    expected = tuple(getattr(model.config, "input_size", scan.shape[1:]))
    if tuple(scan.shape[1:]) != expected:
        raise ShapeMismatch(f"scan slices are {scan.shape[1:]}, model expects {expected}")
    if scan.channels.shape[0] != model.config.in_channels:
        raise ShapeMismatch(f"scan has {scan.channels.shape[0]} channels, model expects {model.config.in_channels}")


def scan_logits(model: SegmentationModel, scan: ScanStack, batch_size: int = 8) -> np.ndarray:
    """Eval-mode logits for every slice of a scan, shape D x C x H x W."""
    _check_input(model, scan)
    model.eval()
    slices = np.moveaxis(scan.channels, 1, 0)  # D x 5 x H x W
    out = [model.predict_logits(slices[i : i + batch_size]) for i in range(0, len(slices), batch_size)]
    return np.concatenate(out)


def predict_mask(model: SegmentationModel, scan: ScanStack, batch_size: int = 8) -> np.ndarray:
    """Binary D x H x W mask by per-slice class argmax (ties go to background)."""
    logits = scan_logits(model, scan, batch_size)
    return np.argmax(logits, axis=1).astype(np.uint8)


def foreground_probs(model: SegmentationModel, scan: ScanStack, batch_size: int = 8) -> np.ndarray:
    logits = scan_logits(model, scan, batch_size).astype(np.float64)
    with no_grad():
        return softmax(Tensor(logits), axis=1).data[:, 1]


def ensemble_predict(models: Sequence[SegmentationModel], scan: ScanStack, rule: str = "mean") -> np.ndarray:
    """Combine models by mean foreground probability (> 0.5) or majority vote."""
    if not models:
        raise EmptyEnsemble("ensemble needs at least one model")
    contracts = {(m.config.in_channels, tuple(getattr(m.config, "input_size", ()))) for m in models}
    if len(contracts) > 1:
        raise HeterogeneousInputs(f"models disagree on input contract: {sorted(contracts)}")
    if rule == "mean":
        prob = np.mean([foreground_probs(m, scan) for m in models], axis=0)
        return (prob > 0.5).astype(np.uint8)
    if rule == "vote":
        votes = np.sum([predict_mask(m, scan) for m in models], axis=0)
        return (2 * votes > len(models)).astype(np.uint8)
    raise ValueError(f"unknown ensemble rule {rule!r}")


def validation_dsc(model: SegmentationModel, scans: Sequence[ScanStack]) -> float:
    """Mean of per-scan volume DSCs."""
    return float(np.mean([dsc(predict_mask(model, s), s.mask) for s in scans]))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list  # dicts with LOG_COLUMNS
    stopped_early: bool


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train_step(model: SegmentationModel, batch: SliceBatch, loss_cfg: LossConfig, opt: RmspropState) -> float:
    model.zero_grad()
    logits = model(Tensor(batch.inputs, dtype=model.dtype))
    loss = compute_loss(loss_cfg, foreground_probability(logits), batch.labels)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss became {value} on slices {batch.refs[:4]}")
    backward(loss)
    params = {n: p for n, p in model.named_parameters() if p.trainable}
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    rmsprop_step(params, grads, opt)
    return value


def fit(cfg: TrainConfig, model: SegmentationModel, train_scans: Sequence[ScanStack],
        val_scans: Sequence[ScanStack], run_dir=None, augment_params: AugmentParams | None = None) -> TrainResult:
    """Train on ``train_scans`` while monitoring mean per-scan DSC on ``val_scans``.

    The model is left holding the best-epoch weights. With ``run_dir`` set,
    ``best.ckpt``, ``last.ckpt`` and ``train_log.csv`` are written there.
    """
    cfg.validate()
    if not train_scans:
        raise EmptySplit("no training scans")
    if not val_scans:
        raise EmptySplit("no validation scans")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    opt = RmspropState(cfg.initial_lr, cfg.rmsprop_alpha, cfg.rmsprop_eps)
    sched = ScheduleState(cfg.initial_lr)
    rows, best = [], None
    for epoch in range(1, cfg.max_epochs + 1):
        lr_used = opt.lr
        model.train()
        total, count = 0.0, 0
        for batch in iter_batches(train_scans, cfg.batch_size, rng, augment_params):
            total += train_step(model, batch, cfg.loss, opt) * len(batch)
            count += len(batch)
        val = validation_dsc(model, val_scans)
        action = schedule_update(sched, val, cfg)
        opt.lr = sched.lr
        rows.append({"epoch": epoch, "train_loss": total / count, "val_dsc": val, "lr": lr_used})
        logger.info("epoch %d loss %.5f val_dsc %.4f lr %g %s", epoch, total / count, val, lr_used, action)
        if sched.improved:
            best = checkpoint_from_model(model, epoch=epoch, best_dsc=val)
            if run_dir is not None:
                write_checkpoint(best, run_dir / "best.ckpt")
        if run_dir is not None:
            write_log(rows, run_dir / "train_log.csv")
        if action == "stop":
            break
    last = checkpoint_from_model(model, epoch=rows[-1]["epoch"], best_dsc=sched.best, optimizer=opt.acc)
    if run_dir is not None:
        write_checkpoint(last, run_dir / "last.ckpt")
    apply_state(model, best)
    return TrainResult(best, last, rows, sched.stop)


def train(cfg: TrainConfig, model: SegmentationModel, dataset: Sequence[ScanStack], fold_plan: FoldPlan, fold: int,
          run_dir=None, augment_params: AugmentParams | None = None) -> TrainResult:
    """Train one cross-validation model, validating on the held-out ``fold``."""
    train_scans = split_scans(dataset, fold_plan, fold, "train")
    val_scans = split_scans(dataset, fold_plan, fold, "val")
    return fit(cfg, model, train_scans, val_scans, run_dir, augment_params)


@dataclass
class FineTuneResult:
    phase1: TrainResult
    phase2: TrainResult


def load_pretrained(model: SegmentationModel, pretrained: Checkpoint) -> list[str]:
    """Copy every pretrained tensor except the model's new layers."""
    if pretrained.arch != model.arch:
        raise IncompatibleCheckpoint(f"pretrained {pretrained.arch!r} cannot seed a {model.arch!r} model")
    try:
        return apply_state(model, replace(pretrained, trainable={}), skip=model.new_layer_patterns)
    except CorruptFile as e:
        raise IncompatibleCheckpoint(str(e)) from None


def fine_tune_two_phase(cfg: TrainConfig, model: SegmentationModel, pretrained: Checkpoint,
                        dataset: Sequence[ScanStack], fold_plan: FoldPlan, fold: int, run_dir=None,
                        augment_params: AugmentParams | None = None) -> FineTuneResult:
    """Train only the new layers first, then everything at a small learning rate."""
    ft = cfg.fine_tune or FineTuneConfig()
    load_pretrained(model, pretrained)
    train_scans = split_scans(dataset, fold_plan, fold, "train")
    val_scans = split_scans(dataset, fold_plan, fold, "val")
    run_dir = Path(run_dir) if run_dir is not None else None

    set_trainable(model, "*", False)
    for pattern in model.new_layer_patterns:
        set_trainable(model, pattern, True)
    cfg1 = replace(cfg, initial_lr=ft.phase1_lr, max_epochs=ft.phase1_epochs)
    phase1 = fit(cfg1, model, train_scans, val_scans, run_dir and run_dir / "phase1", augment_params)

    set_trainable(model, "*", True)
    cfg2 = replace(cfg, initial_lr=ft.phase2_lr)
    phase2 = fit(cfg2, model, train_scans, val_scans, run_dir and run_dir / "phase2", augment_params)
    if run_dir is not None:
        write_checkpoint(phase2.best, run_dir / "best.ckpt")
        write_checkpoint(phase2.last, run_dir / "last.ckpt")
    return FineTuneResult(phase1, phase2)

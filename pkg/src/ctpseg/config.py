"""Experiment configuration: a single JSON document with model, data, train and metrics sections.

Values resolve as command-line flag > config file > built-in default. Unknown
keys anywhere in the document are rejected.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .data import AugmentParams
from .errors import ConfigInvalid
from .losses import LossConfig
from .models import ARCHITECTURES
from .training import FineTuneConfig, TrainConfig

# key -> (default, description); nested dicts are sections
SCHEMA = {
    "run_dir": ("runs/experiment", "Directory receiving checkpoints, logs, reports and the resolved config."),
    "seed": (0, "Seed for model initialization, fold assignment, shuffling and augmentation."),
    "model": {
        "arch": ("pspnet", "Architecture tag: pspnet or unet2d."),
        "pspnet": {
            "in_channels": (5, "Input channels (CT, CBF, CBV, MTT, Tmax)."),
            "bins": ([1, 2, 3, 6], "Pyramid pooling grid sizes, strictly increasing."),
            "backbone_channels": ([16, 16, 32, 64], "Stem width followed by the three residual stage widths."),
            "n_psp": (None, "Channels per pyramid level; null means final backbone width / 4."),
            "num_classes": (2, "Output logit channels."),
            "input_size": ([64, 64], "Slice height and width."),
            "init_channels": (3, "Output channels of the initializer layer."),
            "head_channels": (32, "Width of the 3x3 head convolution."),
        },
        "unet2d": {
            "in_channels": (5, "Input channels."),
            "base_channels": (8, "Width of the first encoder level; doubles per level."),
            "levels": (4, "Number of pooling steps; the slice size must be divisible by 2**levels."),
            "num_classes": (2, "Output logit channels."),
            "input_size": ([64, 64], "Slice height and width."),
        },
    },
    "data": {
        "root": (None, "Dataset directory holding manifest.csv; null generates phantoms in memory."),
        "synth_subjects": (12, "Subjects to generate when root is null."),
        "synth_size": ([64, 64], "Phantom slice size when root is null."),
        "folds": (5, "Number of cross-validation folds."),
        "fold": (0, "Held-out fold for single-model training."),
        "augment": {
            "enabled": (True, "Augment training slices."),
            "rotation_deg": ([-10.0, 10.0], "Rotation range in degrees."),
            "translate_frac": ([-0.1, 0.1], "Translation range as a fraction of the slice size."),
            "scale": ([0.9, 1.1], "Isotropic scale range."),
            "flip_prob": (0.5, "Flip probability for each in-plane axis."),
        },
    },
    "train": {
        "initial_lr": (1e-3, "RMSProp learning rate when training from scratch."),
        "batch_size": (8, "Slices per optimization step."),
        "max_epochs": (200, "Upper bound on training epochs."),
        "plateau_epochs": (20, "Stagnant epochs before the learning rate is divided."),
        "lr_reduce_factor": (10.0, "Divisor applied at each plateau."),
        "early_stop_patience": (50, "Stagnant epochs before training stops."),
        "rmsprop_alpha": (0.9, "Squared-gradient smoothing factor."),
        "rmsprop_eps": (1e-8, "Denominator guard."),
        "loss": {
            "kind": ("focal", "ce, wce or focal."),
            "gamma": (1.0, "Focusing parameter of the focal loss."),
            "w": (None, "Lesion weight for wce; null estimates it from the training split."),
            "invert_weight": (False, "Swap w and 1 - w in the weighted cross entropy."),
            "clamp_eps": (1e-7, "Probabilities are clamped to [eps, 1 - eps] before logs."),
        },
        "fine_tune": {
            "phase1_lr": (1e-2, "Learning rate while only new layers train."),
            "phase2_lr": (1e-4, "Learning rate after all layers are unfrozen."),
            "phase1_epochs": (10, "Length of the first phase."),
        },
    },
    "metrics": {
        "spacing": (None, "Voxel spacing (sx, sy, sz) in mm; null uses each scan's own spacing."),
        "empty_policy": ("flag", "Only 'flag': distances involving an empty mask are reported as undefined."),
    },
}


def _defaults(schema: dict) -> dict:
    return {k: _defaults(v) if isinstance(v, dict) else copy.deepcopy(v[0]) for k, v in schema.items()}


def default_config() -> dict:
    return _defaults(SCHEMA)


def merge(base: dict, override: dict, schema: dict = SCHEMA, path: str = "") -> dict:
    """Return ``base`` updated by ``override``; rejects keys missing from the schema."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in schema:
            raise ConfigInvalid(f"unknown config key {where!r}")
        if isinstance(schema[key], dict):
            if not isinstance(value, dict):
                raise ConfigInvalid(f"config key {where!r} must be an object")
            out[key] = merge(out[key], value, schema[key], where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    """Set ``a.b.c`` in a resolved config, validating the path against the schema."""
    node, schema = cfg, SCHEMA
    *parents, leaf = dotted.split(".")
    for p in parents:
        if p not in schema or not isinstance(schema[p], dict):
            raise ConfigInvalid(f"unknown config key {dotted!r}")
        node, schema = node[p], schema[p]
    if leaf not in schema or isinstance(schema[leaf], dict):
        raise ConfigInvalid(f"unknown config key {dotted!r}")
    node[leaf] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then dotted-key ``overrides``."""
    cfg = default_config()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"{path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigInvalid(f"{path}: top level must be an object")
        cfg = merge(cfg, doc)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            set_path(cfg, dotted, value)
    return cfg


def write_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class Experiment:
    """Typed view of a resolved config."""

    arch: str
    model_config: object
    train: TrainConfig
    augment: AugmentParams
    raw: dict
    estimate_w: bool = False  # wce weight taken from the training split

    @property
    def run_dir(self) -> Path:
        return Path(self.raw["run_dir"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])


def _build(cls, d: dict):
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigInvalid(str(e)) from None


def experiment_from_config(cfg: dict) -> Experiment:
    arch = cfg["model"]["arch"]
    if arch not in ARCHITECTURES:
        raise ConfigInvalid(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    model_cfg = ARCHITECTURES[arch][0].from_dict(cfg["model"][arch])
    model_cfg.validate()
    t = dict(cfg["train"])
    loss = dict(t.pop("loss"))
    estimate = loss["w"] is None
    if estimate:
        loss["w"] = 0.5  # replaced once the training split is known
    ft = _build(FineTuneConfig, t.pop("fine_tune"))
    train = _build(TrainConfig, {**t, "seed": int(cfg["seed"]), "loss": _build(LossConfig, loss), "fine_tune": ft})
    try:
        train.validate()
    except ValueError as e:
        raise ConfigInvalid(str(e)) from None
    aug = _build(AugmentParams, {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["data"]["augment"].items()})
    if cfg["metrics"]["empty_policy"] != "flag":
        raise ConfigInvalid("metrics.empty_policy supports only 'flag'")
    if int(cfg["data"]["folds"]) < 2:
        raise ConfigInvalid("data.folds must be at least 2")
    return Experiment(arch, model_cfg, train, aug, cfg, estimate)


def reference_markdown() -> str:
    """Human-readable listing of every config key with its default."""
    lines = ["# Experiment config reference", "",
             "A config file is one JSON object. Any key may be omitted; omitted keys take the defaults below.",
             "Unknown keys are rejected. Command-line flags override the file.", ""]

    def walk(schema, prefix):
        for key, val in schema.items():
            name = f"{prefix}{key}"
            if isinstance(val, dict):
                walk(val, name + ".")
            else:
                lines.append(f"| `{name}` | `{json.dumps(val[0])}` | {val[1]} |")

    lines += ["| Key | Default | Meaning |", "|---|---|---|"]
    walk(SCHEMA, "")
    return "\n".join(lines) + "\n"


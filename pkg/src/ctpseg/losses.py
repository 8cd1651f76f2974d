"""Cross entropy, weighted cross entropy and focal loss on foreground probabilities.

All three reduce by the mean over pixels. Probabilities are clamped to
``[eps, 1 - eps]`` before any logarithm is taken.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, clamp, log, mean, pow
from .errors import EmptyDataset, NegativeGamma, NonBinaryLabel, ShapeMismatch, WeightOutOfRange
from .kernels import softmax, take_channels

DEFAULT_EPS = 1e-7


@dataclass
class LossConfig:
    kind: str = "focal"
    gamma: float = 1.0
    w: float = 0.5
    invert_weight: bool = False
    clamp_eps: float = DEFAULT_EPS

    def validate(self) -> None:
        if self.kind not in ("ce", "wce", "focal"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.gamma < 0:
            raise NegativeGamma(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.w < 1.0:
            raise WeightOutOfRange(f"w must lie in (0, 1), got {self.w}")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValueError(f"clamp_eps must lie in (0, 0.5), got {self.clamp_eps}")


def _prepare(p: Tensor, y, eps: float):
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if p.shape != y.shape:
        raise ShapeMismatch(f"probabilities {p.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise NonBinaryLabel("labels must be 0 or 1")
    y = y.astype(p.dtype)
    pc = clamp(p, eps, 1.0 - eps)
    return pc, Tensor(y), Tensor(1.0 - y)


def ce_loss(p: Tensor, y, eps: float = DEFAULT_EPS) -> Tensor:
    pc, y, ny = _prepare(p, y, eps)
    return mean(-(y * log(pc)) - ny * log(1.0 - pc))


def wce_loss(p: Tensor, y, w: float, invert_weight: bool = False, eps: float = DEFAULT_EPS) -> Tensor:
    """Weighted cross entropy; ``w`` multiplies the lesion term as written.

    ``invert_weight`` swaps ``w`` and ``1 - w`` (rare class gets the large weight).
    """
    if not 0.0 < w < 1.0:
        raise WeightOutOfRange(f"w must lie in (0, 1), got {w}")
    wpos, wneg = (1.0 - w, w) if invert_weight else (w, 1.0 - w)
    pc, y, ny = _prepare(p, y, eps)
    return mean(-(wpos * y * log(pc)) - wneg * ny * log(1.0 - pc))


def focal_loss(p: Tensor, y, gamma: float = 1.0, eps: float = DEFAULT_EPS) -> Tensor:
    if gamma < 0:
        raise NegativeGamma(f"gamma must be >= 0, got {gamma}")
    pc, y, ny = _prepare(p, y, eps)
    q = 1.0 - pc
    return mean(-(y * pow(q, gamma) * log(pc)) - ny * pow(pc, gamma) * log(q))


def estimate_w(masks) -> float:
    """Lesion pixel fraction over an iterable of label arrays, clamped to [1e-6, 1 - 1e-6]."""
    fg = total = 0
    for m in masks:
        m = np.asarray(m)
        fg += int(np.count_nonzero(m))
        total += m.size
    if total == 0:
        raise EmptyDataset("no labelled pixels to estimate w from")
    return float(np.clip(fg / total, 1e-6, 1 - 1e-6))


def foreground_probability(logits: Tensor) -> Tensor:
    """Softmax over the class axis of N x 2 x H x W logits, foreground channel as N x H x W."""
    fg = take_channels(softmax(logits, axis=1), 1, 2)
    n, _, h, w = fg.shape
    return fg.reshape(n, h, w)


def compute_loss(cfg: LossConfig, p: Tensor, y) -> Tensor:
    if cfg.kind == "ce":
        return ce_loss(p, y, cfg.clamp_eps)
    if cfg.kind == "wce":
        return wce_loss(p, y, cfg.w, cfg.invert_weight, cfg.clamp_eps)
    if cfg.kind == "focal":
        return focal_loss(p, y, cfg.gamma, cfg.clamp_eps)
    raise ValueError(f"unknown loss kind {cfg.kind!r}")

"""Scan stacks, on-disk format, subject-disjoint folds, augmentation and phantoms."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    CorruptHeader,
    EmptySplit,
    NonBinaryLabel,
    ShapeMismatch,
    TooFewSubjects,
    UnknownVersion,
)

logger = logging.getLogger(__name__)

CHANNELS = ("CT", "CBF", "CBV", "MTT", "Tmax")
CHANNEL_FILES = ("ct.raw", "cbf.raw", "cbv.raw", "mtt.raw", "tmax.raw")
STACK_FORMAT_VERSION = 1
DEFAULT_SPACING = (1.0, 1.0, 5.0)


@dataclass
class ScanStack:
    """One slab: five co-registered channel volumes plus a binary lesion mask.

    ``channels`` has shape (5, D, H, W) in :data:`CHANNELS` order and ``mask``
    has shape (D, H, W). ``spacing`` is (sx, sy, sz) in millimetres, i.e.
    (column, row, slice) spacing.
    """

    subject_id: str
    scan_id: str
    channels: np.ndarray
    mask: np.ndarray
    spacing: tuple = DEFAULT_SPACING

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.validate()
        self.mask = np.asarray(self.mask).astype(np.uint8)

    def validate(self) -> None:
        if self.channels.ndim != 4 or self.channels.shape[0] != len(CHANNELS):
            raise ShapeMismatch(f"channels must be 5 x D x H x W, got {self.channels.shape}")
        mask = np.asarray(self.mask)
        if mask.shape != self.channels.shape[1:]:
            raise ShapeMismatch(f"mask {mask.shape} does not match channels {self.channels.shape[1:]}")
        if not np.all((mask == 0) | (mask == 1)):
            raise NonBinaryLabel(f"mask of scan {self.scan_id} is not binary")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.depth < 2:
            logger.warning("scan %s has depth %d (< 2 slices)", self.scan_id, self.depth)

    @property
    def depth(self) -> int:
        return self.channels.shape[1]

    @property
    def shape(self) -> tuple:
        return self.channels.shape[1:]

    def slice(self, z: int) -> "SliceSample":
        return SliceSample(self.channels[:, z].copy(), self.mask[z].copy())


@dataclass
class SliceSample:
    input: np.ndarray  # 5 x H x W, CHANNELS order
    label: np.ndarray  # H x W, {0, 1}


# ---------------------------------------------------------------------------
# stack directories and manifests
# ---------------------------------------------------------------------------


def write_stack(stack: ScanStack, directory) -> Path:
    stack.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": STACK_FORMAT_VERSION,
        "subject_id": stack.subject_id,
        "scan_id": stack.scan_id,
        "shape": list(stack.shape),
        "spacing": list(stack.spacing),
        "channel_names": list(CHANNELS),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    for vol, fname in zip(stack.channels, CHANNEL_FILES):
        (d / fname).write_bytes(np.ascontiguousarray(vol, dtype="<f4").tobytes())
    (d / "mask.raw").write_bytes(np.ascontiguousarray(stack.mask, dtype=np.uint8).tobytes())
    return d


def _read_meta(d: Path) -> dict:
    try:
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptHeader(f"{d / 'meta.json'}: {e}") from None
    required = {"format_version", "subject_id", "scan_id", "shape", "spacing", "channel_names"}
    if not isinstance(meta, dict) or not required <= set(meta):
        raise CorruptHeader(f"{d / 'meta.json'} lacks keys {sorted(required - set(meta or {}))}")
    if meta["format_version"] != STACK_FORMAT_VERSION:
        raise UnknownVersion(f"stack format version {meta['format_version']} in {d}")
    if list(meta["channel_names"]) != list(CHANNELS):
        raise CorruptHeader(f"unexpected channel order {meta['channel_names']} in {d}")
    if len(meta["shape"]) != 3 or min(meta["shape"]) < 1:
        raise CorruptHeader(f"bad shape {meta['shape']} in {d}")
    return meta


def _read_raw(path: Path, dtype, shape) -> np.ndarray:
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise ShapeMismatch(f"{path} holds {len(raw)} bytes, header declares {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def read_stack(directory) -> ScanStack:
    d = Path(directory)
    meta = _read_meta(d)
    shape = tuple(meta["shape"])
    channels = np.stack([_read_raw(d / f, "<f4", shape) for f in CHANNEL_FILES]).astype(np.float32)
    mask = _read_raw(d / "mask.raw", np.uint8, shape).copy()
    return ScanStack(meta["subject_id"], meta["scan_id"], channels, mask, tuple(meta["spacing"]))


def write_dataset(stacks: Sequence[ScanStack], root) -> Path:
    """Write each stack under ``root/<scan_id>`` plus ``root/manifest.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "scan_id", "path"])
        for s in stacks:
            write_stack(s, root / s.scan_id)
            writer.writerow([s.subject_id, s.scan_id, s.scan_id])
    return root / "manifest.csv"


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"subject_id", "scan_id", "path"}:
        raise CorruptHeader(f"{path}: manifest header must be subject_id,scan_id,path")
    for r in rows:
        r["path"] = str((path.parent / r["path"]).resolve())
    return rows


def read_dataset(path) -> list[ScanStack]:
    return [read_stack(r["path"]) for r in read_manifest(path)]


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    assignment: dict  # subject_id -> fold index
    seed: int
    scans: dict = field(default_factory=dict)  # subject_id -> list of scan ids

    def fold_of(self, subject_id: str) -> int:
        return self.assignment[subject_id]

    def subjects_in(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def fold_sizes(self) -> list[int]:
        return [sum(1 for f in self.assignment.values() if f == i) for i in range(self.k)]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": dict(sorted(self.assignment.items())),
                "scans": {s: list(v) for s, v in sorted(self.scans.items())}}


def make_folds(subjects, k: int = 5, seed: int = 0) -> FoldPlan:
    """Assign subjects to ``k`` folds by seeded shuffle and round-robin.

    ``subjects`` is a sequence of ``(subject_id, scan_ids)`` pairs; repeated
    subject ids are merged so that every scan of a subject lands in one fold.
    """
    scans: dict[str, list] = {}
    for sid, scan_ids in subjects:
        scans.setdefault(str(sid), []).extend(scan_ids)
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(scans):
        raise TooFewSubjects(f"{len(scans)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(sorted(scans))
    assignment = {str(s): i % k for i, s in enumerate(order)}
    return FoldPlan(k, assignment, seed, scans)


def folds_for_dataset(dataset: Sequence[ScanStack], k: int = 5, seed: int = 0) -> FoldPlan:
    return make_folds([(s.subject_id, [s.scan_id]) for s in dataset], k, seed)


def split_scans(dataset: Sequence[ScanStack], plan: FoldPlan, fold: int, split: str) -> list[ScanStack]:
    if not 0 <= fold < plan.k:
        raise ValueError(f"fold {fold} outside 0..{plan.k - 1}")
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    want_val = split == "val"
    return [s for s in dataset if (plan.fold_of(s.subject_id) == fold) == want_val]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentParams:
    rotation_deg: tuple = (-10.0, 10.0)
    translate_frac: tuple = (-0.1, 0.1)
    scale: tuple = (0.9, 1.1)
    flip_prob: float = 0.5
    enabled: bool = True

    @classmethod
    def disabled(cls) -> "AugmentParams":
        return cls(enabled=False)


OPERATIONS = ("rotate", "translate", "flip", "scale")


@dataclass
class AugmentDraw:
    rotation_deg: float
    translate: tuple  # (rows, cols) in pixels
    flips: tuple  # (flip rows, flip cols)
    scale: float
    order: tuple


def sample_augmentation(params: AugmentParams, shape, rng: np.random.Generator) -> AugmentDraw:
    h, w = shape
    rot = rng.uniform(*params.rotation_deg)
    ty = rng.uniform(*params.translate_frac) * h
    tx = rng.uniform(*params.translate_frac) * w
    flips = (bool(rng.random() < params.flip_prob), bool(rng.random() < params.flip_prob))
    scale = rng.uniform(*params.scale)
    order = tuple(OPERATIONS[i] for i in rng.permutation(len(OPERATIONS)))
    return AugmentDraw(rot, (ty, tx), flips, scale, order)


def _affine(draw: AugmentDraw, shape) -> np.ndarray:
    """Homogeneous matrix mapping input (row, col) to output (row, col)."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    centre = np.array([[1, 0, cy], [0, 1, cx], [0, 0, 1]], dtype=float)
    uncentre = np.array([[1, 0, -cy], [0, 1, -cx], [0, 0, 1]], dtype=float)
    th = math.radians(draw.rotation_deg)
    rot = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]])
    ops = {
        "rotate": centre @ rot @ uncentre,
        "translate": np.array([[1, 0, draw.translate[0]], [0, 1, draw.translate[1]], [0, 0, 1]], dtype=float),
        "flip": np.array(
            [
                [-1 if draw.flips[0] else 1, 0, (h - 1) if draw.flips[0] else 0],
                [0, -1 if draw.flips[1] else 1, (w - 1) if draw.flips[1] else 0],
                [0, 0, 1],
            ],
            dtype=float,
        ),
        "scale": centre @ np.diag([draw.scale, draw.scale, 1.0]) @ uncentre,
    }
    m = np.eye(3)
    for name in draw.order:
        m = ops[name] @ m
    return m


def apply_augmentation(sample: SliceSample, draw: AugmentDraw) -> SliceSample:
    shape = sample.label.shape
    inv = np.linalg.inv(_affine(draw, shape))
    img = np.stack(
        [ndimage.affine_transform(c, inv, order=1, mode="constant", cval=0.0) for c in sample.input]
    ).astype(sample.input.dtype)
    lab = ndimage.affine_transform(sample.label.astype(np.float32), inv, order=0, mode="constant", cval=0.0)
    return SliceSample(img, (lab > 0.5).astype(np.uint8))


def augment(sample: SliceSample, params: AugmentParams, rng: np.random.Generator) -> SliceSample:
    """Random rotation, translation, flips and scaling applied in a random order.

    Images are resampled bilinearly and labels by nearest neighbour; pixels
    mapped from outside the frame become 0.
    """
    if not params.enabled:
        return SliceSample(sample.input.copy(), sample.label.copy())
    return apply_augmentation(sample, sample_augmentation(params, sample.label.shape, rng))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class SliceBatch:
    inputs: np.ndarray  # N x 5 x H x W
    labels: np.ndarray  # N x H x W
    refs: list  # (scan_id, z) per row

    def __len__(self):
        return len(self.refs)


def slice_iter(dataset: Sequence[ScanStack], plan: FoldPlan, fold: int, split: str, batch_size: int = 8,
               rng: np.random.Generator | None = None, augment_params: AugmentParams | None = None
               ) -> Iterator[SliceBatch]:
    """Batches of 2D slices for one side of a fold.

    The train split is shuffled and augmented (given ``rng``); the val split
    keeps dataset order and is never augmented. The last partial batch is kept.
    """
    scans = split_scans(dataset, plan, fold, split)
    if not any(s.depth for s in scans):
        raise EmptySplit(f"fold {fold} has no {split} slices")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    train = split == "train"
    if train and rng is None:
        rng = np.random.default_rng(0)
    return iter_batches(scans, batch_size, rng if train else None, augment_params if train else None)


def iter_batches(scans: Sequence[ScanStack], batch_size: int, rng: np.random.Generator | None = None,
                 augment_params: AugmentParams | None = None) -> Iterator[SliceBatch]:
    """Slices of ``scans`` in batches; shuffled when ``rng`` is given, augmented when params are enabled."""
    refs = [(s, z) for s in scans for z in range(s.depth)]
    if rng is not None:
        refs = [refs[i] for i in rng.permutation(len(refs))]
    augmenting = augment_params is not None and augment_params.enabled
    if augmenting and rng is None:
        raise ValueError("augmentation needs an rng")
    for start in range(0, len(refs), batch_size):
        chunk = refs[start : start + batch_size]
        samples = [s.slice(z) for s, z in chunk]
        if augmenting:
            samples = [augment(smp, augment_params, rng) for smp in samples]
        yield SliceBatch(
            np.stack([smp.input for smp in samples]),
            np.stack([smp.label for smp in samples]),
            [(s.scan_id, z) for s, z in chunk],
        )


def collect_slices(scans: Sequence[ScanStack]) -> SliceBatch:
    refs = [(s, z) for s in scans for z in range(s.depth)]
    return SliceBatch(
        np.stack([s.channels[:, z] for s, z in refs]),
        np.stack([s.mask[z] for s, z in refs]),
        [(s.scan_id, z) for s, z in refs],
    )


# ---------------------------------------------------------------------------
# synthetic perfusion phantoms
# ---------------------------------------------------------------------------

# brain background and lesion levels per channel (CT, CBF, CBV, MTT, Tmax)
BRAIN_LEVEL = np.array([35.0, 50.0, 4.0, 4.0, 1.5], dtype=np.float32)
LESION_LEVEL = np.array([31.0, 12.0, 1.5, 9.0, 8.0], dtype=np.float32)
NOISE_LEVEL = np.array([2.0, 5.0, 0.4, 0.4, 0.3], dtype=np.float32)


@dataclass
class SynthConfig:
    size: tuple = (64, 64)
    depth_range: tuple = (2, 8)
    scans_per_subject: tuple = (1, 2)
    lesions_per_scan: tuple = (0, 2)
    lesion_fraction: tuple = (0.005, 0.08)
    spacing: tuple = DEFAULT_SPACING


def _brain_mask(rng, depth, h, w) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cy = (h - 1) / 2 + rng.uniform(-0.03, 0.03) * h
    cx = (w - 1) / 2 + rng.uniform(-0.03, 0.03) * w
    ay, ax = rng.uniform(0.38, 0.45) * h, rng.uniform(0.30, 0.38) * w
    vol = np.zeros((depth, h, w), dtype=bool)
    for z in range(depth):
        shrink = 1.0 - 0.04 * abs(z - (depth - 1) / 2)
        vol[z] = ((yy - cy) / (ay * shrink)) ** 2 + ((xx - cx) / (ax * shrink)) ** 2 <= 1.0
    return vol


def _blob(rng, brain, h, w) -> np.ndarray:
    depth = brain.shape[0]
    zs, ys, xs = np.nonzero(brain)
    i = rng.integers(len(zs))
    cz, cy, cx = zs[i], ys[i], xs[i]
    ry, rx = rng.uniform(0.05, 0.2) * h, rng.uniform(0.05, 0.2) * w
    rz = rng.uniform(1.0, max(1.5, depth / 1.5))
    th = rng.uniform(0, np.pi)
    zz, yy, xx = np.mgrid[0:depth, 0:h, 0:w].astype(float)
    u = (yy - cy) * np.cos(th) + (xx - cx) * np.sin(th)
    v = -(yy - cy) * np.sin(th) + (xx - cx) * np.cos(th)
    return ((u / ry) ** 2 + (v / rx) ** 2 + ((zz - cz) / rz) ** 2) <= 1.0


def _lesion_mask(rng, brain, n_lesions, frac_range, h, w) -> np.ndarray:
    lo, hi = frac_range
    mask = np.zeros_like(brain)
    if n_lesions == 0:
        return mask
    for _ in range(500):
        mask = np.zeros_like(brain)
        for _ in range(n_lesions):
            mask |= _blob(rng, brain, h, w)
        mask &= brain
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask
    raise RuntimeError("could not place lesions within the requested volume fraction")


def synth_scan(rng: np.random.Generator, subject_id: str, scan_id: str, cfg: SynthConfig) -> ScanStack:
    h, w = cfg.size
    depth = int(rng.integers(cfg.depth_range[0], cfg.depth_range[1] + 1))
    brain = _brain_mask(rng, depth, h, w)
    n_les = int(rng.integers(cfg.lesions_per_scan[0], cfg.lesions_per_scan[1] + 1))
    lesion = _lesion_mask(rng, brain, n_les, cfg.lesion_fraction, h, w)
    # soft edge on the perfusion deficit; the label stays hard
    deficit = ndimage.gaussian_filter(lesion.astype(np.float32), sigma=(0, 0.8, 0.8))
    channels = np.empty((len(CHANNELS), depth, h, w), dtype=np.float32)
    for c in range(len(CHANNELS)):
        texture = ndimage.gaussian_filter(rng.standard_normal((depth, h, w)), sigma=(0, 3, 3)) * 3.0
        noise = rng.standard_normal((depth, h, w))
        level = BRAIN_LEVEL[c] + (LESION_LEVEL[c] - BRAIN_LEVEL[c]) * deficit
        vol = level + NOISE_LEVEL[c] * (texture + noise)
        channels[c] = np.where(brain, vol, 0.0)
    return ScanStack(subject_id, scan_id, channels, lesion.astype(np.uint8), cfg.spacing)


def synth_generate(n_subjects: int, size=(64, 64), seed: int = 0, cfg: SynthConfig | None = None) -> list[ScanStack]:
    """Deterministic perfusion phantoms: 1-2 scans per subject with blob lesions.

    Inside lesions CBF and CBV drop while MTT and Tmax rise; CT dips slightly.
    """
    if n_subjects < 1:
        raise ValueError(f"n_subjects must be >= 1, got {n_subjects}")
    cfg = cfg or SynthConfig()
    cfg = SynthConfig(**{**cfg.__dict__, "size": tuple(size)})
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_subjects):
        sid = f"S{i:03d}"
        n_scans = int(rng.integers(cfg.scans_per_subject[0], cfg.scans_per_subject[1] + 1))
        for j in range(n_scans):
            out.append(synth_scan(rng, sid, f"{sid}_{j}", cfg))
    return out

"""Overlap, surface-distance and volume metrics for binary lesion masks.

Distance functions take ``spacing`` in *array axis order* (for a D x H x W
volume that is (sz, sy, sx)); :func:`axis_spacing` converts a scan's
(sx, sy, sz) tuple. Distances are in millimetres, volumes in millilitres.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyGroup, EmptySurface, ShapeMismatch

METRICS = ("dsc", "hd", "assd", "precision", "recall", "avd")
CSV_COLUMNS = ("scan_id", "dsc", "hd_mm", "assd_mm", "precision", "recall", "avd_ml", "undefined_flags")


def _binary_pair(x, y):
    x, y = np.asarray(x).astype(bool), np.asarray(y).astype(bool)
    if x.shape != y.shape:
        raise ShapeMismatch(f"mask shapes differ: {x.shape} vs {y.shape}")
    return x, y


def axis_spacing(spacing_xyz: Sequence[float], ndim: int = 3) -> tuple:
    sx, sy, sz = (tuple(spacing_xyz) + (1.0, 1.0, 1.0))[:3]
    return (sz, sy, sx) if ndim == 3 else (sy, sx)


def dsc(x, y) -> float:
    """Dice coefficient 2|X & Y| / (|X| + |Y|); two empty masks score 1."""
    x, y = _binary_pair(x, y)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


@dataclass
class SurfaceSet:
    coords: np.ndarray  # (n, ndim) integer grid positions
    spacing: tuple

    def __len__(self):
        return len(self.coords)

    @property
    def points(self) -> np.ndarray:
        return self.coords * np.asarray(self.spacing, dtype=float)


def extract_surface(mask, spacing: Sequence[float] | None = None) -> SurfaceSet:
    """Foreground voxels with at least one background face neighbour.

    Voxels on the image border count as touching background.
    """
    m = np.asarray(mask).astype(bool)
    spacing = tuple(float(s) for s in spacing) if spacing is not None else (1.0,) * m.ndim
    if len(spacing) != m.ndim:
        raise ShapeMismatch(f"spacing {spacing} does not match a {m.ndim}-D mask")
    structure = ndimage.generate_binary_structure(m.ndim, 1)
    interior = ndimage.binary_erosion(m, structure=structure, border_value=0)
    return SurfaceSet(np.argwhere(m & ~interior), spacing)


def _nearest(a: SurfaceSet, b: SurfaceSet) -> np.ndarray:
    """For each point of ``a`` the distance to the closest point of ``b``."""
    if len(a) == 0 or len(b) == 0:
        raise EmptySurface("distance to or from an empty surface is undefined")
    dist, _ = cKDTree(b.points).query(a.points, k=1)
    return dist


def hausdorff(xs: SurfaceSet, ys: SurfaceSet) -> float:
    return float(max(_nearest(xs, ys).max(), _nearest(ys, xs).max()))


def average_surface_distance(xs: SurfaceSet, ys: SurfaceSet) -> float:
    return float(_nearest(xs, ys).mean())


def assd(xs: SurfaceSet, ys: SurfaceSet) -> float:
    return 0.5 * (average_surface_distance(xs, ys) + average_surface_distance(ys, xs))


def precision_recall(pred, truth) -> tuple[float, float]:
    """(TP / (TP + FP), TP / (TP + FN)); NaN where the denominator is zero."""
    x, y = _binary_pair(pred, truth)
    tp = int(np.logical_and(x, y).sum())
    fp = int(np.logical_and(x, ~y).sum())
    fn = int(np.logical_and(~x, y).sum())
    precision = tp / (tp + fp) if tp + fp else math.nan
    recall = tp / (tp + fn) if tp + fn else math.nan
    return precision, recall


def avd(pred, truth, spacing_xyz: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Absolute volume difference in ml."""
    x, y = _binary_pair(pred, truth)
    voxel_mm3 = float(np.prod(spacing_xyz))
    return abs(int(x.sum()) - int(y.sum())) * voxel_mm3 / 1000.0


# ---------------------------------------------------------------------------
# per-scan records and aggregation
# ---------------------------------------------------------------------------


@dataclass
class MetricRecord:
    scan_id: str
    dsc: float
    hd: float
    assd: float
    precision: float
    recall: float
    avd: float
    flags: list = field(default_factory=list)
    fold: int | None = None

    def value(self, metric: str) -> float:
        return getattr(self, metric)

    def defined(self, metric: str) -> bool:
        return f"{metric}_undefined" not in self.flags


def evaluate_scan(pred, truth, spacing_xyz=(1.0, 1.0, 5.0), scan_id: str = "", fold: int | None = None) -> MetricRecord:
    """All six metrics for one predicted/reference mask pair.

    Both masks empty: DSC 1 and distances 0. Exactly one empty: DSC 0 and
    the distances are flagged undefined (stored as NaN).
    """
    x, y = _binary_pair(pred, truth)
    flags = []
    sp = axis_spacing(spacing_xyz, x.ndim) if x.ndim in (2, 3) else (1.0,) * x.ndim
    xs, ys = extract_surface(x, sp), extract_surface(y, sp)
    if len(xs) == 0 and len(ys) == 0:
        hd_v = assd_v = 0.0
    elif len(xs) == 0 or len(ys) == 0:
        hd_v = assd_v = math.nan
        flags += ["hd_undefined", "assd_undefined"]
    else:
        hd_v, assd_v = hausdorff(xs, ys), assd(xs, ys)
    prec, rec = precision_recall(x, y)
    if math.isnan(prec):
        flags.append("precision_undefined")
    if math.isnan(rec):
        flags.append("recall_undefined")
    return MetricRecord(scan_id, dsc(x, y), hd_v, assd_v, prec, rec, avd(x, y, spacing_xyz), flags, fold)


@dataclass
class Aggregate:
    mean: float
    std: float
    count: int
    excluded: int = 0
    single_sample: bool = False
    minimum: float = math.nan
    maximum: float = math.nan

    def formatted(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


def aggregate_values(values: Iterable[float]) -> Aggregate:
    """Mean and sample (n - 1) standard deviation, skipping NaN entries."""
    vals = [float(v) for v in values]
    kept = [v for v in vals if not math.isnan(v)]
    if not kept:
        raise EmptyGroup("no defined values to aggregate")
    arr = np.asarray(kept)
    single = len(kept) == 1
    std = 0.0 if single else float(arr.std(ddof=1))
    return Aggregate(float(arr.mean()), std, len(kept), len(vals) - len(kept), single, float(arr.min()), float(arr.max()))


@dataclass
class MetricsReport:
    records: list
    groups: dict  # group key -> {metric: Aggregate}
    grouping: str


def aggregate_report(records: Sequence[MetricRecord], grouping: str = "overall") -> MetricsReport:
    if grouping not in ("overall", "per-fold"):
        raise ValueError(f"grouping must be 'overall' or 'per-fold', got {grouping!r}")
    if not records:
        raise EmptyGroup("no records to aggregate")
    buckets: dict = {}
    for r in records:
        key = "overall" if grouping == "overall" else r.fold
        buckets.setdefault(key, []).append(r)
    groups = {}
    for key, recs in buckets.items():
        groups[key] = {}
        for m in METRICS:
            vals = [r.value(m) if r.defined(m) else math.nan for r in recs]
            try:
                groups[key][m] = aggregate_values(vals)
            except EmptyGroup:
                groups[key][m] = Aggregate(math.nan, math.nan, 0, len(vals))
    return MetricsReport(list(records), groups, grouping)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_metrics_csv(records: Sequence[MetricRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.scan_id, _fmt(r.dsc), _fmt(r.hd), _fmt(r.assd), _fmt(r.precision), _fmt(r.recall),
                        _fmt(r.avd), ";".join(r.flags)])
    return path


def read_metrics_csv(path, fold: int | None = None) -> list[MetricRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            def val(k):
                return math.nan if row[k] == "" else float(row[k])

            out.append(MetricRecord(row["scan_id"], val("dsc"), val("hd_mm"), val("assd_mm"), val("precision"),
                                    val("recall"), val("avd_ml"),
                                    [f for f in row["undefined_flags"].split(";") if f], fold))
    return out


def format_fold_table(columns: dict) -> str:
    """Per-fold DSC table with a mean +- std total row; ``columns`` maps a label to fold DSCs."""
    labels = list(columns)
    n = max(len(v) for v in columns.values())
    lines = ["| Fold | " + " | ".join(labels) + " |", "|---" * (len(labels) + 1) + "|"]
    for i in range(n):
        cells = [f"{columns[l][i]:.2f}" if i < len(columns[l]) else "" for l in labels]
        lines.append(f"| {i + 1} | " + " | ".join(cells) + " |")
    totals = [aggregate_values(columns[l]).formatted() for l in labels]
    lines.append("| **Total** | " + " | ".join(f"**{t}**" for t in totals) + " |")
    return "\n".join(lines)


def format_overall_table(report: MetricsReport, label: str = "Ours") -> str:
    agg = report.groups["overall"]
    head = "| | DSC | HD (mm) | ASSD (mm) | Precision | Recall | AVD (ml) |"
    row = f"| {label} | " + " | ".join(
        "n/a" if agg[m].count == 0 else f"{agg[m].mean:.2f}" for m in METRICS
    ) + " |"
    return "\n".join([head, "|---" * 7 + "|", row])


def write_report_md(path, records: Sequence[MetricRecord], label: str = "DSC") -> Path:
    """Per-fold and overall summary for cross-validation records (each carrying ``fold``)."""
    by_fold = aggregate_report(records, "per-fold")
    folds = sorted(k for k in by_fold.groups if k is not None)
    fold_dsc = [by_fold.groups[f]["dsc"].mean for f in folds]
    overall = aggregate_report(records, "overall")
    lines = ["# Cross-validation report", "", "## Per-fold DSC", ""]
    lines.append(format_fold_table({label: fold_dsc}))
    scan_agg = overall.groups["overall"]["dsc"]
    lines += ["", f"Mean over folds: {aggregate_values(fold_dsc).formatted()} ({len(fold_dsc)} folds); "
                  f"mean over scans: {scan_agg.formatted()} ({scan_agg.count} scans).", ""]
    lines += ["## Overall metrics", "", format_overall_table(overall), ""]
    excluded = {m: a.excluded for m, a in overall.groups["overall"].items() if a.excluded}
    if excluded:
        lines.append("Undefined values excluded: " + ", ".join(f"{m}: {n}" for m, n in excluded.items()))
        lines.append("")
    path = Path(path)
    path.write_text("\n".join(lines), encoding="utf-8")
    return path

"""Hard segmentation metrics on binary masks.

Ratios whose denominator is zero are *undefined* and come back as ``None``
rather than a silent 0 or 1; :func:`aggregate` decides what to do with them.
Hausdorff distances are in pixel units over full foreground point sets.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError

METRIC_NAMES = ("dsc", "iou", "hd", "sensitivity", "precision", "f1")
AGG_MODES = ("exclude_undefined", "count_empty_match_as_one")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsRow:
    volume_id: str
    slice_index: int
    dsc: float | None
    iou: float | None
    hd: float | None
    sensitivity: float | None
    precision: float | None
    f1: float | None
    counts: ConfusionCounts

    @property
    def both_empty(self):
        return self.counts.tp + self.counts.fp + self.counts.fn == 0


def _as_binary(mask, what):
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    if not np.isin(m, (0, 1)).all():
        raise ValueError(f"{what} mask is not binary (values outside {{0, 1}})")
    return m.astype(bool)


def confusion(pred, truth):
    pred = _as_binary(pred, "pred")
    truth = _as_binary(truth, "truth")
    if pred.shape != truth.shape:
        raise ShapeError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def _ratio(num, den):
    return None if den == 0 else num / den


def dsc(c):
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def f1(c):
    # TP / (TP + (FP + FN)/2), scaled by 2 to stay in integers
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def iou(c):
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def sensitivity(c):
    return _ratio(c.tp, c.tp + c.fn)


def precision(c):
    return _ratio(c.tp, c.tp + c.fp)


def _points(x):
    pts = np.asarray(x)
    if pts.ndim == 2 and pts.shape[1] == 2 and pts.dtype.kind in "iu":
        return pts.astype(np.int64)
    if pts.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pts, dtype=np.int64).reshape(-1, 2)


def _directed_sq(x, y):
    """Largest squared nearest-neighbour distance from ``x`` to ``y`` (exact integers)."""
    # points shared with y contribute 0 and can be dropped up front
    ys = {tuple(p) for p in y.tolist()}
    rest = np.array([p for p in x.tolist() if tuple(p) not in ys], dtype=np.int64).reshape(-1, 2)
    if len(rest) == 0:
        return 0
    _, idx = cKDTree(y).query(rest, k=1)
    diff = rest - y[idx]
    return int((diff * diff).sum(axis=1).max())


def directed_hausdorff(x, y):
    """``max_{a in x} min_{b in y} |a - b|``; ``None`` if either set is empty."""
    x, y = _points(x), _points(y)
    if len(x) == 0 or len(y) == 0:
        return None
    return math.sqrt(_directed_sq(x, y))


def hausdorff(x, y):
    x, y = _points(x), _points(y)
    if len(x) == 0 or len(y) == 0:
        return None
    return math.sqrt(max(_directed_sq(x, y), _directed_sq(y, x)))


def mask_points(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"expected a 2-D mask, got shape {mask.shape}")
    return np.argwhere(mask.astype(bool)).astype(np.int64)


def evaluate_pair(pred, truth, volume_id="", slice_index=0):
    c = confusion(pred, truth)
    return MetricsRow(
        volume_id=volume_id,
        slice_index=int(slice_index),
        dsc=dsc(c),
        iou=iou(c),
        hd=hausdorff(mask_points(pred), mask_points(truth)),
        sensitivity=sensitivity(c),
        precision=precision(c),
        f1=f1(c),
        counts=c,
    )


@dataclass
class MetricSummary:
    mode: str
    means: dict = field(default_factory=dict)
    n_used: dict = field(default_factory=dict)


def aggregate(rows, mode="exclude_undefined"):
    """Average each metric over ``rows``.

    ``exclude_undefined`` skips undefined values.  ``count_empty_match_as_one``
    first scores slices where both masks are empty as a perfect match
    (ratios 1, hd 0); other undefined values are still skipped.
    """
    if mode not in AGG_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}; expected one of {AGG_MODES}")
    rows = list(rows)
    if not rows:
        raise ValueError("cannot aggregate an empty row list")
    summary = MetricSummary(mode)
    for name in METRIC_NAMES:
        vals = []
        for r in rows:
            v = getattr(r, name)
            if v is None and mode == "count_empty_match_as_one" and r.both_empty:
                v = 0.0 if name == "hd" else 1.0
            if v is not None:
                vals.append(v)
        summary.n_used[name] = len(vals)
        summary.means[name] = math.fsum(vals) / len(vals) if vals else None
    return summary

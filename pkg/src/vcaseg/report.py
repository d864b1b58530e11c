"""CSV reports and PNG overlays."""

import csv
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ShapeError
from .metrics import METRIC_NAMES, ConfusionCounts, MetricsRow

ROW_HEADER = ["volume_id", "slice_index", "dsc", "iou", "hd", "sensitivity", "precision", "f1", "tp", "fp", "tn", "fn"]
SUMMARY_HEADER = ["aggregation", *METRIC_NAMES, *(f"n_{m}" for m in METRIC_NAMES)]
MODE_LABELS = {"exclude_undefined": "modeA", "count_empty_match_as_one": "modeB"}


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def _open_for_write(path):
    try:
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def write_rows_csv(rows, path):
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROW_HEADER)
        for r in rows:
            c = r.counts
            w.writerow([r.volume_id, r.slice_index, *(_fmt(getattr(r, m)) for m in ROW_HEADER[2:8]),
                        c.tp, c.fp, c.tn, c.fn])


def write_summary_csv(summaries, path):
    """``summaries`` maps aggregation mode -> ``MetricSummary``."""
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for mode, s in summaries.items():
            w.writerow([MODE_LABELS.get(mode, mode), *(_fmt(s.means[m]) for m in METRIC_NAMES),
                        *(s.n_used[m] for m in METRIC_NAMES)])


def write_csv(rows_or_summaries, path):
    """Dispatch on content: a list of ``MetricsRow`` or a mode -> summary dict."""
    if isinstance(rows_or_summaries, dict):
        write_summary_csv(rows_or_summaries, path)
    else:
        write_rows_csv(rows_or_summaries, path)


def read_rows_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            def val(k):
                return None if rec[k] == "" else float(rec[k])

            rows.append(MetricsRow(
                rec["volume_id"], int(rec["slice_index"]), val("dsc"), val("iou"), val("hd"),
                val("sensitivity"), val("precision"), val("f1"),
                ConfusionCounts(int(rec["tp"]), int(rec["fp"]), int(rec["tn"]), int(rec["fn"])),
            ))
    return rows


# --------------------------------------------------------------------------

TP_RGB = (0, 1, 0)
FP_RGB = (1, 0, 0)
FN_RGB = (0, 0, 1)


@dataclass
class OverlaySpec:
    image: np.ndarray
    pred: np.ndarray
    truth: np.ndarray
    path: str


def overlay_rgb(image, pred, truth):
    """8-bit RGB array: grayscale base, TP tinted green, FP red, FN blue.

    A tinted pixel keeps half its gray level in every channel and gets 128
    added to its class channel, so the class is the one channel that strictly
    exceeds the other two, and untinted pixels have R == G == B.
    """
    image = np.asarray(image, dtype=np.float64)
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if not image.shape == pred.shape == truth.shape:
        raise ShapeError(f"overlay shapes differ: image {image.shape}, pred {pred.shape}, truth {truth.shape}")
    gray = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    half = (gray // 2)[..., None]
    for cls, tint in ((pred & truth, TP_RGB), (pred & ~truth, FP_RGB), (~pred & truth, FN_RGB)):
        rgb[cls] = (half[cls] + 128 * np.array(tint, dtype=np.uint8)).astype(np.uint8)
    return rgb


def render_overlay(spec):
    rgb = overlay_rgb(spec.image, spec.pred, spec.truth)
    Image.fromarray(rgb).save(spec.path, format="PNG")
    return spec.path


def decode_overlay(path):
    """Recover per-pixel classes from an overlay PNG: 0=TN, 1=TP, 2=FP, 3=FN."""
    rgb = np.asarray(Image.open(path).convert("RGB")).astype(np.int16)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    cls = np.zeros(r.shape, dtype=np.uint8)
    cls[(g > r) & (g > b)] = 1
    cls[(r > g) & (r > b)] = 2
    cls[(b > r) & (b > g)] = 3
    return cls


def write_mask_png(mask, path):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def read_mask_png(path):
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8) if arr.max() > 1 else arr.astype(np.uint8)

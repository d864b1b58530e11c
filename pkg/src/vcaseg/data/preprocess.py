"""Slice extraction, resizing and intensity normalisation."""

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, ShapeError
from ..tensor_core import interp_matrix

TARGET_HW = (224, 192)


@dataclass
class SliceSample:
    """One preprocessed axial slice.

    ``image`` is float32 in [0, 1]; ``mask`` is uint8 in {0, 1}.  The
    constructor enforces both, and that the two share a 2-D shape.
    """

    image: np.ndarray
    mask: np.ndarray
    volume_id: str
    slice_index: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ShapeError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if not np.isfinite(self.image).all() or self.image.min() < 0 or self.image.max() > 1:
            raise DataError(f"{self.volume_id}:{self.slice_index}: image values must lie in [0, 1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"{self.volume_id}:{self.slice_index}: mask is not binary")
        self.mask = self.mask.astype(np.uint8)
        self.slice_index = int(self.slice_index)


def extract_axial_slices(img, mask):
    """Pairs ``(image_slice, mask_slice)`` along the third axis, in index order.

    Slice ``k`` is ``voxels[:, :, k].T`` so rows follow the second axis; a
    197x233x189 volume gives 189 slices of 233x197.
    """
    if img.dims != mask.dims:
        raise ShapeError(
            f"image {img.source or '<image>'} has dims {img.dims} but mask "
            f"{mask.source or '<mask>'} has dims {mask.dims}"
        )
    return [(img.voxels[:, :, k].T, mask.voxels[:, :, k].T) for k in range(img.dims[2])]


def resize(arr, target=TARGET_HW, kind="bilinear"):
    """Resize a 2-D array.

    ``bilinear`` uses half-pixel centres (align-corners off); ``nearest``
    picks source index ``floor(i * n_in / n_out)`` and so never invents new
    values.
    """
    arr = np.asarray(arr)
    h, w = arr.shape
    th, tw = target
    if kind == "nearest":
        rows = np.minimum((np.arange(th) * h) // th, h - 1)
        cols = np.minimum((np.arange(tw) * w) // tw, w - 1)
        return arr[np.ix_(rows, cols)]
    if kind == "bilinear":
        return interp_matrix(h, th) @ arr.astype(np.float64) @ interp_matrix(w, tw).T
    raise ValueError(f"unknown resize kind {kind!r}")


def normalize(x, p_lo=0.0, p_hi=99.0):
    """Clip to the ``[p_lo, p_hi]`` percentiles of ``x`` and map affinely onto [0, 1].

    Constant input maps to zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = np.percentile(x, [p_lo, p_hi])
    if hi <= lo:
        return np.zeros_like(x)
    return (np.clip(x, lo, hi) - lo) / (hi - lo)


def preprocess_volume(img, mask, volume_id, target=TARGET_HW, p_lo=0.0, p_hi=99.0):
    """Volume pair -> list of :class:`SliceSample` (resized, normalised per volume)."""
    pairs = extract_axial_slices(img, mask)
    images = np.stack([resize(a, target, "bilinear") for a, _ in pairs])
    masks = [resize(m, target, "nearest") for _, m in pairs]
    images = normalize(images, p_lo, p_hi)
    return [SliceSample(images[k], masks[k], volume_id, k) for k in range(len(pairs))]


def read_manifest(path):
    """Tab-separated ``image<TAB>mask`` lines; blank lines and ``#`` comments skipped."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask', got {line!r}")
            pairs.append((parts[0].strip(), parts[1].strip()))
    return pairs

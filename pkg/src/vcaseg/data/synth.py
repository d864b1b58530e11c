"""Synthetic T1-like slices with hypointense elliptical lesions."""

import numpy as np
from scipy.ndimage import gaussian_filter

from .preprocess import TARGET_HW, SliceSample


def _ellipse(h, w, rng):
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    side = min(h, w)
    ay, ax = rng.uniform(0.08, 0.2, size=2) * side + 0.75
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def synth_generate(n_samples, lesion_prob=0.5, seed=0, shape=TARGET_HW, volume_id="synth"):
    """``n_samples`` slices; each carries 1-3 dark ellipses with probability ``lesion_prob``.

    Background is Gaussian-smoothed noise rescaled to [0.45, 0.95]; lesion
    pixels sit in [0.05, 0.2].  Identical arguments give bitwise-identical
    output.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if not 0.0 <= lesion_prob <= 1.0:
        raise ValueError("lesion_prob must lie in [0, 1]")
    h, w = shape
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_samples):
        noise = gaussian_filter(rng.standard_normal((h, w)), sigma=max(1.0, min(h, w) / 24))
        lo, hi = noise.min(), noise.max()
        img = 0.45 + 0.5 * (noise - lo) / (hi - lo if hi > lo else 1.0)
        mask = np.zeros((h, w), dtype=bool)
        if rng.random() < lesion_prob:
            for _ in range(rng.integers(1, 4)):
                mask |= _ellipse(h, w, rng)
            img[mask] = rng.uniform(0.05, 0.2, size=int(mask.sum()))
        out.append(SliceSample(np.clip(img, 0, 1).astype(np.float32), mask.astype(np.uint8), volume_id, k))
    return out

from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass
class SplitSpec:
    val_fraction: float = 0.1
    level: str = "slice"
    seed: int = 0


def split(samples, spec=None):
    """Seeded shuffle then train/val partition, at slice or volume level.

    With ``level="volume"`` all slices of a volume land on the same side.
    Returns ``(train, val)`` preserving each side's original relative order.
    """
    spec = spec or SplitSpec()
    samples = list(samples)
    if spec.level not in ("slice", "volume"):
        raise ValueError(f"split level must be 'slice' or 'volume', got {spec.level!r}")
    if not 0.0 < spec.val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(spec.seed)
    if spec.level == "slice":
        n = len(samples)
        if n < 10:
            raise DataError(f"need at least 10 slices to split, got {n}")
        order = rng.permutation(n)
        n_val = max(1, int(round(n * spec.val_fraction)))
        val_idx = set(order[:n_val].tolist())
    else:
        vols = sorted({s.volume_id for s in samples})
        if len(vols) < 10:
            raise DataError(f"need at least 10 volumes for a volume-level split, got {len(vols)}")
        order = rng.permutation(len(vols))
        n_val = max(1, int(round(len(vols) * spec.val_fraction)))
        val_vols = {vols[i] for i in order[:n_val]}
        val_idx = {i for i, s in enumerate(samples) if s.volume_id in val_vols}
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val

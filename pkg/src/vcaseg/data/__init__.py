from .nifti import NiftiHeader, Volume, read_nifti
from .packed import PackedDataset, load_packed, pack_dataset
from .preprocess import (
    TARGET_HW,
    SliceSample,
    extract_axial_slices,
    normalize,
    preprocess_volume,
    read_manifest,
    resize,
)
from .split import SplitSpec, split
from .synth import synth_generate

__all__ = [
    "NiftiHeader", "Volume", "read_nifti", "PackedDataset", "load_packed", "pack_dataset",
    "TARGET_HW", "SliceSample", "extract_axial_slices", "normalize", "preprocess_volume",
    "read_manifest", "resize", "SplitSpec", "split", "synth_generate",
]

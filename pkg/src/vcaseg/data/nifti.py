"""Minimal single-file NIfTI-1 reader (``.nii`` / ``.nii.gz``).

Only the three datatypes ATLAS ships are decoded: uint8, int16 and float32.
Byte order is detected from ``sizeof_hdr``.
"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import NiftiError, TruncatedFileError, UnsupportedDatatypeError

HEADER_SIZE = 348
DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_DATATYPE_NAMES = {
    1: "binary", 2: "uint8", 4: "int16", 8: "int32", 16: "float32", 32: "complex64",
    64: "float64", 128: "rgb24", 256: "int8", 512: "uint16", 768: "uint32",
    1024: "int64", 1280: "uint64", 1536: "float128", 2304: "rgba32",
}


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple
    datatype: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    endian: str

    @property
    def shape(self):
        rank = self.dim[0]
        return tuple(int(d) for d in self.dim[1 : rank + 1])


@dataclass
class Volume:
    voxels: np.ndarray
    header: NiftiHeader
    source: str = ""
    kind: str = "image"

    @property
    def dims(self):
        return self.voxels.shape[:3]


def _open_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: corrupt or truncated gzip stream ({exc})") from exc
    return raw


def parse_header(raw, path="<bytes>"):
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError(f"{path}: sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", raw[108:120])
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}; expected 'n+1' or 'ni1'")
    if not 1 <= dim[0] <= 7:
        raise NiftiError(f"{path}: invalid rank dim[0]={dim[0]}")
    return NiftiHeader(HEADER_SIZE, tuple(dim), datatype, bitpix, tuple(pixdim),
                       vox_offset, scl_slope, scl_inter, magic[:3], endian)


def read_nifti(path, kind="image"):
    """Load a volume; scaling ``slope * raw + inter`` is applied when slope != 0.

    Mask volumes (``kind="mask"``) are snapped to {0, 1} and rejected if any
    voxel is not within 1e-3 of either value.
    """
    raw = _open_bytes(path)
    hdr = parse_header(raw, path)
    if hdr.magic == b"ni1":
        raise NiftiError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if hdr.datatype not in DATATYPES:
        name = _DATATYPE_NAMES.get(hdr.datatype, f"code {hdr.datatype}")
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype {name}; expected uint8, int16 or float32")
    dtype = np.dtype(DATATYPES[hdr.datatype]).newbyteorder(hdr.endian)
    shape = hdr.shape
    count = int(np.prod(shape))
    offset = int(hdr.vox_offset) if hdr.vox_offset >= HEADER_SIZE else 352
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: data section truncated ({len(raw)} bytes, need {need})")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    # NIfTI stores the first axis fastest
    vox = data.reshape(shape[::-1]).transpose().astype(np.float64)
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        vox = vox * hdr.scl_slope + hdr.scl_inter
    if len(shape) > 3:
        if any(d != 1 for d in shape[3:]):
            raise NiftiError(f"{path}: 4-D and higher volumes are not supported (shape {shape})")
        vox = vox.reshape(shape[:3])
    while vox.ndim < 3:
        vox = vox[..., None]
    if kind == "mask":
        snapped = np.rint(vox)
        if np.abs(vox - snapped).max(initial=0) > 1e-3 or not np.isin(snapped, (0, 1)).all():
            raise NiftiError(f"{path}: mask volume contains values other than 0 and 1")
        vox = snapped
    return Volume(vox, hdr, str(path), kind)

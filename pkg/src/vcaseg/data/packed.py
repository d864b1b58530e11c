"""Packed slice cache.

Layout (little-endian)::

    b"VCAD" | version u32 | count u32 |
    count x ( id_len u16 | volume_id utf-8 | slice_index u32 |
              image f32[224*192] | mask u8[224*192] )

:class:`PackedDataset` indexes the record headers only, so arbitrarily large
files can be opened without reading the pixel data.
"""

import os
import struct

import numpy as np

from ..errors import BadMagicError, FormatError, ShapeError, TruncatedFileError, VersionMismatchError
from .preprocess import TARGET_HW, SliceSample

MAGIC = b"VCAD"
VERSION = 1
_NPIX = TARGET_HW[0] * TARGET_HW[1]
_PAYLOAD = _NPIX * 4 + _NPIX


def pack_dataset(samples, path):
    """Write samples (any iterable) to ``path``; returns the number written."""
    n = 0
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, 0))
        for s in samples:
            if s.image.shape != TARGET_HW:
                raise ShapeError(f"packed slices must be {TARGET_HW[0]}x{TARGET_HW[1]}, got {s.image.shape}")
            vid = s.volume_id.encode("utf-8")
            fh.write(struct.pack("<H", len(vid)) + vid + struct.pack("<I", s.slice_index))
            fh.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
            n += 1
        fh.seek(8)
        fh.write(struct.pack("<I", n))
    return n


class PackedDataset:
    """Random access to a packed file; only record headers are read on open."""

    def __init__(self, path):
        self.path = str(path)
        size = os.path.getsize(self.path)
        self._offsets = []
        self._ids = []
        with open(self.path, "rb") as fh:
            head = fh.read(12)
            if len(head) < 4 or head[:4] != MAGIC:
                raise BadMagicError(f"{self.path}: bad magic {head[:4]!r}, expected {MAGIC!r}")
            if len(head) < 12:
                raise TruncatedFileError(f"{self.path}: header truncated")
            version, count = struct.unpack("<II", head[4:12])
            if version != VERSION:
                raise VersionMismatchError(f"{self.path}: format version {version}, expected {VERSION}")
            pos = 12
            for i in range(count):
                fh.seek(pos)
                lb = fh.read(2)
                if len(lb) < 2:
                    raise TruncatedFileError(f"{self.path}: truncated at record {i} of {count}")
                (ln,) = struct.unpack("<H", lb)
                rec = fh.read(ln + 4)
                if len(rec) < ln + 4:
                    raise TruncatedFileError(f"{self.path}: truncated at record {i} of {count}")
                vid = rec[:ln].decode("utf-8")
                (idx,) = struct.unpack("<I", rec[ln:])
                data_at = pos + 2 + ln + 4
                if data_at + _PAYLOAD > size:
                    raise TruncatedFileError(f"{self.path}: pixel data of record {i} runs past end of file")
                self._offsets.append(data_at)
                self._ids.append((vid, idx))
                pos = data_at + _PAYLOAD
        if pos != size:
            raise FormatError(f"{self.path}: {size - pos} trailing bytes after {count} records")

    def __len__(self):
        return len(self._offsets)

    def ids(self):
        return list(self._ids)

    def __getitem__(self, i):
        if i < 0:
            i += len(self)
        off = self._offsets[i]
        img = np.fromfile(self.path, dtype="<f4", count=_NPIX, offset=off).reshape(TARGET_HW)
        mask = np.fromfile(self.path, dtype=np.uint8, count=_NPIX, offset=off + _NPIX * 4).reshape(TARGET_HW)
        vid, idx = self._ids[i]
        return SliceSample(img.astype(np.float32), mask, vid, idx)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_packed(path):
    """Every sample in ``path`` as a list; the whole file is validated first."""
    ds = PackedDataset(path)
    return [ds[i] for i in range(len(ds))]

"""Weight file I/O.

Layout (little-endian)::

    b"VCAW" | version u32 | config_len u32 | config utf-8 ("key=value" lines) |
    entry_count u32 |
    entry_count x ( name_len u16 | name utf-8 | dtype u8 | rank u8 |
                    dims u32[rank] | values )

dtype tag 0 is float32, 1 is float64.  Batch-norm running statistics are
ordinary entries whose names end in ``.running_mean`` / ``.running_var``.
"""

import struct
from dataclasses import fields

import numpy as np

from .errors import BadMagicError, ConfigMismatchError, FormatError, TruncatedFileError, VersionMismatchError
from .model import ModelConfig, VcaNet

MAGIC = b"VCAW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(items, arrays):
    """Serialise ``items`` (str -> str) and ``arrays`` (name -> ndarray) to bytes."""
    cfg = "".join(f"{k}={v}\n" for k, v in items.items()).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise FormatError(f"{name}: cannot store dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: file truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf, path="<bytes>"):
    """Inverse of :func:`encode`: returns ``(items, arrays)``."""
    r = _Reader(buf, path)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    items = {}
    for line in r.take(cfg_len).decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            items[k] = v
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _DTYPES:
            raise FormatError(f"{path}: entry {name!r} has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dt = _DTYPES[tag]
        n = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} unexpected trailing bytes")
    return items, arrays


def save_weights(net, path, extra_items=None, extra_arrays=None):
    items = dict(net.config.to_items())
    items.update(extra_items or {})
    arrays = dict(net.state_arrays())
    arrays.update(extra_arrays or {})
    data = encode(items, arrays)
    with open(path, "wb") as fh:
        fh.write(data)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read(), str(path))


def check_config(expected, items):
    """Raise :class:`ConfigMismatchError` on the first field that differs."""
    found = ModelConfig.from_items(items)
    exp_items = expected.to_items()
    for f in fields(ModelConfig):
        if f.name not in items:
            raise ConfigMismatchError(f.name, exp_items[f.name], None)
        if getattr(found, f.name) != getattr(expected, f.name):
            raise ConfigMismatchError(f.name, exp_items[f.name], items[f.name])


def net_from_checkpoint(items, arrays, config=None, path="<checkpoint>"):
    if config is not None:
        check_config(config, items)
    cfg = ModelConfig.from_items(items)
    names = [n for n in arrays if not n.startswith("sgd.")]
    dtypes = {arrays[n].dtype for n in names}
    if len(dtypes) != 1:
        raise FormatError(f"{path}: mixed dtypes among weight entries: {sorted(map(str, dtypes))}")
    net = VcaNet(cfg, dtypes.pop())
    expected = net.state_arrays()
    missing = [n for n in expected if n not in arrays]
    unknown = [n for n in names if n not in expected]
    if missing or unknown:
        raise FormatError(f"{path}: entries do not match the configured network "
                          f"(missing {missing[:3]}, unexpected {unknown[:3]})")
    for name, target in expected.items():
        if arrays[name].shape != target.shape:
            raise FormatError(f"{path}: entry {name!r} has shape {arrays[name].shape}, expected {target.shape}")
        target[...] = arrays[name]
    return net


def load_weights(path, config=None):
    """Rebuild a :class:`VcaNet` from a weight file.

    If ``config`` is given, any difference from the stored config raises
    :class:`ConfigMismatchError` naming the field.
    """
    items, arrays = read_checkpoint(path)
    return net_from_checkpoint(items, arrays, config, str(path))

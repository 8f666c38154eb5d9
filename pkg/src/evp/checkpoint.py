"""Binary checkpoint container for named parameter tensors.

Layout (all integers little-endian)::

    magic     8 bytes   b"EVPCKPT\\0"
    version   u32
    config    u32 byte length + UTF-8 text
    count     u32 number of records
    record*   u32 name length, UTF-8 name,
              u8 dtype tag (0 = float64, 1 = float32),
              u32 rank, rank x u64 dims,
              raw little-endian scalars
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import IntegrityError

MAGIC = b"EVPCKPT\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def dumps(params, config_text=""):
    """Serialize an iterable of (name, array) pairs plus a config text block."""
    items = [(n, np.asarray(a)) for n, a in params]
    out = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode("utf-8")
    out += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        out += [struct.pack("<I", len(raw)), raw, struct.pack("<BI", tag, arr.ndim)]
        out += [struct.pack("<Q", d) for d in arr.shape]
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(out)


def loads(blob):
    """Inverse of :func:`dumps`: returns (config_text, {name: array})."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise IntegrityError("checkpoint truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise IntegrityError("not an EVP checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    (n_cfg,) = struct.unpack("<I", take(4))
    config_text = bytes(take(n_cfg)).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = bytes(take(n_name)).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _DTYPES:
            raise IntegrityError(f"{name}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        dt = _DTYPES[tag]
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(dims)
        if name in arrays:
            raise IntegrityError(f"duplicate record {name!r}")
        arrays[name] = data.astype(dt.newbyteorder("="))
    if pos != len(view):
        raise IntegrityError("trailing bytes after last record")
    return config_text, arrays


def save(path, params, config_text=""):
    with open(path, "wb") as fh:
        fh.write(dumps(params, config_text))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())

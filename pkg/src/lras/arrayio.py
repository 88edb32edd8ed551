"""Binary array and checkpoint-block serialization.

Array files: 16-byte little-endian header — magic ``MW01`` (4s), dtype code
(u8: 0=float32, 1=float64), ndim (u8), then five u16 dims (unused dims zero) —
followed by the row-major payload. Dataset arrays are always float32.

Checkpoint parameter blocks: length-prefixed name, dtype code, ndim, u32 dims,
raw payload. Blocks are float32 when written from 32-bit training state and
float64 when written from 64-bit state, so save/load round-trips bit-exactly
in either mode.
"""

import struct

import numpy as np

MAGIC = b"MW01"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_array(path, arr, dtype=np.float32):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim > 5:
        raise ValueError(f"at most 5 dims supported, got {arr.ndim}")
    if any(d > 0xFFFF for d in arr.shape):
        raise ValueError(f"dimension too large for header: {arr.shape}")
    dims = list(arr.shape) + [0] * (5 - arr.ndim)
    header = struct.pack("<4sBB5H", MAGIC, _CODES[arr.dtype], arr.ndim, *dims)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def read_array(path):
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated header")
        magic, code, ndim, *dims = struct.unpack("<4sBB5H", header)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if code not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        shape = tuple(dims[:ndim])
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(f.read(), dtype=_DTYPES[code], count=count)
    return data.reshape(shape).copy()


def write_blocks(f, arrays):
    """Append named parameter blocks to an open binary file."""
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float32)
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.tobytes())


def read_blocks(f):
    """Read parameter blocks until EOF; returns name -> array."""
    out = {}
    while True:
        raw = f.read(2)
        if not raw:
            return out
        (nlen,) = struct.unpack("<H", raw)
        name = f.read(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", f.read(2))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        dt = _DTYPES[code]
        out[name] = np.frombuffer(f.read(count * dt.itemsize), dtype=dt).reshape(shape).copy()


def write_kv(path, pairs):
    """Human-readable key-value text: one ``key = value`` line per entry."""
    with open(path, "w") as f:
        for k, v in pairs:
            f.write(f"{k} = {v}\n")


def read_kv(path):
    pairs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            pairs.append((k.strip(), v.strip()))
    return pairs

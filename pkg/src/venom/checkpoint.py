"""Named-tensor checkpoint files.

Format (little-endian): magic "VNMC", u32 version=1, u32 tensor-count, then
per tensor: u16 name-length, name bytes (utf-8), u8 rank, rank×u32 dims,
values as 32-bit IEEE-754 floats.  Scalars are rank 0 with a single value.

Values are stored in float32; ``save_tensors`` quantizes and ``load_tensors``
returns float64 arrays on the float32 grid, so save→load→save reproduces the
file bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractViolationError, FormatError

_MAGIC = b"VNMC"
_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in dict order; scalars may be passed as plain floats."""
    parts = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise ContractViolationError(f"tensor name length {len(raw)} outside 1..65535")
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim > 0xFF:
            raise ContractViolationError(f"tensor {name!r} rank {arr.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<I", d))
        parts.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a checkpoint; malformed input raises a format error naming the offset."""
    with open(path, "rb") as fh:
        blob = fh.read()

    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"truncated {what}: need {n} bytes", offset=len(blob))
        chunk = blob[off : off + n]
        off += n
        return chunk

    magic = take(4, "magic")
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (count,) = struct.unpack("<I", take(4, "tensor count"))

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_off = off
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid utf-8", offset=name_off + 2) from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", offset=name_off)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = tuple(struct.unpack("<I", take(4, f"dim of {name!r}"))[0] for _ in range(rank))
        n_values = 1
        for d in dims:
            n_values *= d
        values_off = off
        raw = take(4 * n_values, f"values of {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
        if not np.isfinite(arr).all():
            bad = int(np.argmax(~np.isfinite(arr.reshape(-1))))
            raise FormatError(f"non-finite value in {name!r}", offset=values_off + 4 * bad)
        out[name] = arr
    if off != len(blob):
        raise FormatError(f"trailing data: {len(blob) - off} extra bytes", offset=off)
    return out

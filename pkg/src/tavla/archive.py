"""Binary tensor archive, the on-disk container for weights and episodes.

Layout (all little-endian):

    magic  b"OTTR"
    version        u32   (currently 1)
    tensor count   u32
    per tensor:
        name length  u16
        name         UTF-8 bytes
        dtype        u8    0 = float32, 1 = uint8, 2 = int64, 3 = float64
        rank         u8
        dims         u64 x rank
        payload      raw little-endian array bytes, C order

Names are unique and written in insertion order; reading then writing an
archive reproduces the file byte for byte. Malformed input raises
:class:`FormatError` naming the byte offset where parsing failed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError

MAGIC = b"OTTR"
VERSION = 1

_DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("u1"),
    2: np.dtype("<i8"),
    3: np.dtype("<f8"),
}
_CODE_FOR_KIND = {
    ("f", 4): 0,
    ("u", 1): 1,
    ("i", 8): 2,
    ("f", 8): 3,
}


def _dtype_code(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    code = _CODE_FOR_KIND.get(key)
    if code is None:
        raise UsageError(
            f"unsupported archive dtype {arr.dtype}; use f32, f64, u8 or i64"
        )
    return code


def write_archive(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` in insertion order."""
    parts: list[bytes] = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen: set[str] = set()
    for name, arr in tensors.items():
        if name in seen:
            raise UsageError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise UsageError(f"tensor name too long ({len(raw)} bytes)")
        arr = np.asarray(arr)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shapes intact above
        code = _dtype_code(arr)
        arr = arr.astype(_DTYPE_CODES[code], copy=False)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_archive(path: str | Path) -> dict[str, np.ndarray]:
    """Read an archive back into an ordered name -> array mapping."""
    blob = Path(path).read_bytes()
    return parse_archive(blob)


def parse_archive(blob: bytes) -> dict[str, np.ndarray]:
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(
                f"truncated archive: needed {n} bytes for {what} at offset {off}"
            )
        chunk = blob[off : off + n]
        off += n
        return chunk

    if need(4, "magic") != MAGIC:
        raise FormatError("bad magic at offset 0")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_at = off
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        try:
            name = need(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid UTF-8 name at offset {name_at + 2}") from e
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r} at offset {name_at}")
        code, rank = struct.unpack("<BB", need(2, "dtype/rank"))
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise FormatError(f"unknown dtype code {code} at offset {off - 2}")
        dims = struct.unpack(f"<{rank}Q", need(8 * rank, "dims"))
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if rank == 0:
            dims = ()
            nbytes = dtype.itemsize
        payload = need(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes at offset {off}")
    return out


def text_tensor(text: str) -> np.ndarray:
    """Encode a string as a u8 tensor (UTF-8 bytes)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def tensor_text(arr: np.ndarray) -> str:
    """Decode a u8 tensor written by :func:`text_tensor`."""
    if arr.dtype != np.uint8 or arr.ndim != 1:
        raise FormatError(f"text tensor must be 1-d u8; got {arr.dtype} rank {arr.ndim}")
    return arr.tobytes().decode("utf-8")

"""Named-tensor archive used for weights and checkpoints.

Binary layout, all integers little-endian::

    b"FTRA"  u32 version  u32 entry_count
    entry:   u16 name_len  name (utf-8)  u8 dtype  u8 rank  u64 dim * rank  payload

dtype codes: 1 float32, 2 float64, 3 int64, 4 uint8. The payload is the row-major
little-endian array bytes.
"""

from __future__ import annotations

import logging
import os
import struct
from collections.abc import Iterable, Mapping
from pathlib import Path

import numpy as np

from finetune_lab.utils import FinetuneLabError

logger = logging.getLogger(__name__)

MAGIC = b"FTRA"
VERSION = 1

_CODE_DTYPES: dict[int, np.dtype] = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
}
# keyed by (kind, itemsize) so byte order does not affect the lookup
_DTYPE_CODES = {(dtype.kind, dtype.itemsize): code for code, dtype in _CODE_DTYPES.items()}

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_DTYPE_RANK = struct.Struct("<BB")


class ArchiveError(FinetuneLabError):
    """Malformed, truncated or incompatible archive."""

    pass


def _entries(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
    items = tensors.items() if isinstance(tensors, Mapping) else tensors
    seen: set[str] = set()
    for name, array in items:
        if name in seen:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        seen.add(name)
        yield name, np.asarray(array)


def encode_archive(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    """Serialize named arrays; iteration order is preserved."""

    chunks: list[bytes] = []
    count = 0
    for name, array in _entries(tensors):
        code = _DTYPE_CODES.get((array.dtype.kind, array.dtype.itemsize))
        if code is None:
            raise ArchiveError(f"tensor {name!r}: unsupported dtype {array.dtype}")
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name[:40]!r}...")
        if array.ndim > 0xFF:
            raise ArchiveError(f"tensor {name!r}: rank {array.ndim} too large")
        chunks.append(_NAME_LEN.pack(len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(_DTYPE_RANK.pack(code, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes())
        count += 1
    return _HEADER.pack(MAGIC, VERSION, count) + b"".join(chunks)


def decode_archive(payload: bytes, *, source: str = "<bytes>") -> dict[str, np.ndarray]:
    """Parse archive bytes into an insertion-ordered dict of arrays."""

    view = memoryview(payload)
    offset = 0

    def take(size: int, what: str) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise ArchiveError(f"{source}: truncated while reading {what} at byte {offset}")
        chunk = view[offset : offset + size]
        offset += size
        return chunk

    magic, version, count = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise ArchiveError(f"{source}: bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise ArchiveError(f"{source}: unsupported archive version {version} (expected {VERSION})")

    tensors: dict[str, np.ndarray] = {}
    for index in range(count):
        (name_len,) = _NAME_LEN.unpack(take(_NAME_LEN.size, f"entry {index} name length"))
        try:
            name = bytes(take(name_len, f"entry {index} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ArchiveError(f"{source}: entry {index} name is not utf-8") from exc
        if name in tensors:
            raise ArchiveError(f"{source}: duplicate tensor name {name!r}")
        code, rank = _DTYPE_RANK.unpack(take(_DTYPE_RANK.size, f"{name} dtype"))
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise ArchiveError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"{name} shape"))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = take(nbytes, f"{name} payload")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()

    if offset != len(view):
        raise ArchiveError(f"{source}: {len(view) - offset} trailing bytes after last entry")
    return tensors


def write_archive(path: str | Path, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> Path:
    """Write atomically: the payload goes to a sibling temp file that replaces ``path``."""

    path = Path(path)
    payload = encode_archive(tensors)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise ArchiveError(f"failed to write archive {path}: {exc}") from exc
    logger.debug("archive_written", extra={"path": str(path), "bytes": len(payload)})
    return path


def read_archive(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise ArchiveError(f"failed to read archive {path}: {exc}") from exc
    return decode_archive(payload, source=str(path))


__all__ = [
    "ArchiveError",
    "MAGIC",
    "VERSION",
    "decode_archive",
    "encode_archive",
    "read_archive",
    "write_archive",
]

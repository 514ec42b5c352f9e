import hashlib
import json
from collections.abc import Iterable, Mapping
from typing import Any

import numpy as np


class FinetuneLabError(Exception):
    """Base class for every error raised by finetune-lab."""

    pass


def derive_rng(stream: str, *keys: int) -> np.random.Generator:
    """Return an independent generator for a named stream and non-negative integer keys.

    The stream name and the number of keys are hashed along with the keys, so streams
    with different names or key counts never share a seed.
    """

    tag = int.from_bytes(hashlib.sha256(stream.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([tag, len(keys), *(int(k) for k in keys)]))


def stable_hash(payload: Mapping[str, Any]) -> str:
    """SHA-256 of a mapping rendered as canonical JSON (sorted keys, no spaces)."""

    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def checksum_arrays(arrays: Iterable[tuple[str, np.ndarray]]) -> str:
    """SHA-256 over (name, dtype, shape, raw bytes) of named arrays in the given order."""

    digest = hashlib.sha256()
    for name, array in arrays:
        contiguous = np.ascontiguousarray(array)
        digest.update(name.encode("utf-8"))
        digest.update(contiguous.dtype.str.encode("ascii"))
        digest.update(repr(contiguous.shape).encode("ascii"))
        digest.update(contiguous.tobytes())
    return digest.hexdigest()


def format_table(rows: list[list[str]]) -> str:
    """Render rows of cells as left-aligned, space-padded text columns."""

    if not rows:
        return ""
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines)

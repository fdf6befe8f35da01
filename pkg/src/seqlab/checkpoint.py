"""Self-describing binary container for checkpoints.

Layout (all integers little-endian):

    8 bytes   magic "SEQLAB1\\0"
    u64       length of UTF-8 JSON metadata
    ...       metadata bytes
    u64       number of arrays
    per array:
        u32   name length, then UTF-8 name
        u32   ndim, then ndim * u64 dims
        ...   float64 little-endian data

Round-trips are bit-exact; any truncation or shape inconsistency raises
CheckpointError before partial data escapes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SEQLAB1\x00"


def save_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    # insertion order is deterministic and must survive the round trip
    # (restored metric records are re-serialized byte-for-byte on resume)
    payload = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"truncated checkpoint {path} at byte {off} (+{n} needed)")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint container")
    (meta_len,) = struct.unpack("<Q", take(8))
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata block ({exc})") from exc
    (n_arrays,) = struct.unpack("<Q", take(8))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        arrays[name] = data.astype(np.float64).copy()
    if off != len(view):
        raise CheckpointError(f"{path}: {len(view) - off} trailing bytes after arrays")
    return meta, arrays

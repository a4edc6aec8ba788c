"""Named-tensor checkpoint file: magic "L2LW", little-endian uint32 version,
then for each tensor: uint32 name length, utf-8 name, uint32 rank, uint32
dims, float32 little-endian data.  Tensors are read until end of file."""

from __future__ import annotations

import struct

import numpy as np

WEIGHTS_MAGIC = b"L2LW"
WEIGHTS_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_weights(path, named_tensors):
    """named_tensors: iterable of (name, ndarray) pairs, order preserved."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", WEIGHTS_VERSION))
        for name, arr in named_tensors:
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != WEIGHTS_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * count, f"data of {name!r}"), dtype="<f4")
        out[name] = data.astype(np.float64).reshape(dims)
    return out

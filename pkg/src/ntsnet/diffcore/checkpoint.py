"""Binary checkpoint format.

Little-endian throughout::

    b"NTSC"                      magic
    u32 version                  currently 1
    repeated until EOF:
        u32 name_length
        name_length bytes        utf-8 parameter name
        u32 rank
        rank * u32               dims
        prod(dims) * f32         row-major values

Parameters come first, then buffers; a loader tells them apart by name
(buffers end in ``.running_mean`` / ``.running_var``).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .params import ParamSet
from .tensor import Tensor

MAGIC = b"NTSC"
VERSION = 1
BUFFER_SUFFIXES = (".running_mean", ".running_var")


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an NTSC checkpoint (bad magic)")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"truncated record {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out


def save_checkpoint(path, params: ParamSet) -> None:
    Path(path).write_bytes(dumps(params.arrays()))


def load_checkpoint(path) -> ParamSet:
    arrays = loads(Path(path).read_bytes())
    params = {n: Tensor(a) for n, a in arrays.items() if not n.endswith(BUFFER_SUFFIXES)}
    buffers = {n: a for n, a in arrays.items() if n.endswith(BUFFER_SUFFIXES)}
    return ParamSet(params, buffers)


def check_compatible(loaded: ParamSet, template: ParamSet) -> None:
    """Raise CheckpointError unless names and shapes match ``template`` exactly."""
    want = {n: t.shape for n, t in template.items()} | {n: b.shape for n, b in template.buffers.items()}
    have = {n: t.shape for n, t in loaded.items()} | {n: b.shape for n, b in loaded.buffers.items()}
    missing = sorted(set(want) - set(have))
    extra = sorted(set(have) - set(want))
    if missing or extra:
        raise CheckpointError(f"architecture mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in want.items():
        if have[name] != shape:
            raise CheckpointError(f"architecture mismatch: {name} has shape {have[name]}, expected {shape}")

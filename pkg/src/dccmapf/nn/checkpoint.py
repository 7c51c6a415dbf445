"""Versioned binary checkpoint container.

Layout::

    magic            13 bytes  b"DCCMAPF-CKPT\\n"
    version          uint32 LE
    header length    uint32 LE
    header           UTF-8 JSON (sorted keys): step, meta, parameter table,
                     optimizer scalars and moment table
    payload          raw float32 LE values, parameters first, then moments,
                     in header order
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DCCMAPF-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    moments: dict[str, np.ndarray] = field(default_factory=dict)


def _table(arrays: Mapping[str, np.ndarray]) -> list[dict]:
    return [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {
        "step": int(ckpt.step),
        "meta": ckpt.meta,
        "params": _table(ckpt.params),
        "optimizer": ckpt.optimizer,
        "moments": _table(ckpt.moments),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for arr in list(ckpt.params.values()) + list(ckpt.moments.values()):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(blob[off:off + hlen].decode())
    off += hlen

    def read(table):
        out = {}
        nonlocal off
        for entry in table:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            end = off + 4 * count
            if end > len(blob):
                raise CheckpointError(f"truncated checkpoint at {entry['name']!r}")
            out[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
            off = end
        return out

    params = read(header["params"])
    moments = read(header["moments"])
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(params, header["step"], header["meta"], header["optimizer"], moments)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())

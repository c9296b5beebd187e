"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic b"CQTCKPT\\0"
    uint32    format version (currently 1)
    uint32    header length H
    H bytes   UTF-8 JSON header: model hyper-parameters plus free metadata
    uint32    number of tensors
    per tensor, in model order:
        uint16   name length N
        N bytes  UTF-8 tensor name
        uint8    number of dimensions R
        R*uint32 dimensions
        float32  values, row-major, little-endian
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import TransformerParams

MAGIC = b"CQTCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: TransformerParams, metadata: dict | None = None) -> bytes:
    header = json.dumps({"model": params.hyper(), "metadata": metadata or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header,
             struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> tuple[TransformerParams, dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        return _parse(data)
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _parse(data: bytes) -> tuple[TransformerParams, dict]:
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = arr.astype(np.float64)
    if off != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    params = TransformerParams(**header["model"], tensors=tensors)
    params.check()
    return params, header["metadata"]


def save_checkpoint(path, params: TransformerParams, metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params, metadata))


def load_checkpoint(path) -> tuple[TransformerParams, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())

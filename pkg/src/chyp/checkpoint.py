"""Binary checkpoint container for ``NetworkParams``.

Layout (little-endian)::

    b"CHKP"  u32 version  u32 n_tensors  u64 data_offset  u64 meta_offset  u64 meta_len
    n_tensors x { u16 name_len, name, u8 dtype (1 = f32), u8 ndim, ndim x u32, u64 offset, u64 nbytes }
    tensor bytes (offsets relative to data_offset)
    JSON metadata (meta_len bytes at meta_offset)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import HashMismatch, IncompatibleCheckpoint
from .network import LAYER_SHAPES, NetworkParams

MAGIC = b"CHKP"
VERSION = 1
F32 = 1
_HEADER = struct.Struct("<4sIIQQQ")


def atomic_write(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(params: NetworkParams, metadata: dict | None = None) -> bytes:
    tensors = dict(params.tensors)
    tensors["head.gain"] = params.gains
    tensors["head.bias"] = params.biases
    meta = {
        "seed": int(params.seed),
        "n_candidates": int(params.n_candidates),
        "frozen": sorted(params.frozen),
        **(metadata or {}),
    }
    table = bytearray()
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        enc = name.encode()
        table += struct.pack("<H", len(enc)) + enc
        table += struct.pack("<BB", F32, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", offset, len(data))
        blobs.append(data)
        offset += len(data)
    data_offset = _HEADER.size + len(table)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    header = _HEADER.pack(MAGIC, VERSION, len(tensors), data_offset,
                          data_offset + offset, len(meta_bytes))
    return header + bytes(table) + b"".join(blobs) + meta_bytes


def decode(buf: bytes) -> tuple[NetworkParams, dict]:
    if len(buf) < _HEADER.size:
        raise IncompatibleCheckpoint("file too short for a checkpoint header")
    magic, version, n, data_offset, meta_offset, meta_len = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise IncompatibleCheckpoint("not a CHKP checkpoint")
    if version != VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint version {version}")
    pos = _HEADER.size
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode()
        pos += name_len
        dtype, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        off, nbytes = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        if dtype != F32:
            raise IncompatibleCheckpoint(f"{name}: unknown dtype code {dtype}")
        start = data_offset + off
        arr = np.frombuffer(buf[start : start + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    meta = json.loads(buf[meta_offset : meta_offset + meta_len])
    for name, shape in LAYER_SHAPES.items():
        if name not in tensors:
            raise IncompatibleCheckpoint(f"missing tensor {name}")
        if tensors[name].shape != shape:
            raise IncompatibleCheckpoint(f"{name}: shape {tensors[name].shape} != {shape}")
    gains = tensors.pop("head.gain")
    biases = tensors.pop("head.bias")
    params = NetworkParams(tensors, gains, biases, frozenset(meta.get("frozen", [])),
                           int(meta.get("seed", 0)))
    return params, meta


def save(path: str | Path, params: NetworkParams, metadata: dict | None = None) -> None:
    atomic_write(path, encode(params, metadata))


def load(path: str | Path, candidate_hashes: dict[str, str] | None = None,
         allow_head_reset: bool = False) -> tuple[NetworkParams, dict]:
    """Load a checkpoint, checking candidate-set hashes when given.

    Per-camera hashes that differ from the stored ones raise ``HashMismatch``
    unless ``allow_head_reset``, in which case the heads are re-initialized to
    identity (training-free adaptation to new candidates).
    """
    params, meta = decode(Path(path).read_bytes())
    if candidate_hashes:
        stored = meta.get("candidate_hashes", {})
        bad = [cam for cam, h in candidate_hashes.items() if stored.get(cam) != h]
        if bad:
            if not allow_head_reset:
                raise HashMismatch(
                    f"candidate set for camera {bad[0]} does not match the checkpoint"
                )
            params = params.with_heads(params.n_candidates)
            meta["heads_reset"] = True
    return params, meta

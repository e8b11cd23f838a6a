"""Self-verifying checkpoint files.

Layout (all integers little-endian)::

    b"BDCK" | u32 version | u64 header length | header JSON | tensor payload | sha256(all previous bytes)

The header lists every tensor's name, dtype, shape, offset and byte length in
the payload; tensors are stored row-major little-endian.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError

MAGIC = b"BDCK"
VERSION = 1
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.int8: "i1",
    torch.uint8: "u1",
    torch.bool: "?",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    phase: str
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in ckpt.tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        data = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    if len({e["name"] for e in entries}) != len(entries):
        raise ValueError("tensor names must be unique")
    header = json.dumps({"phase": ckpt.phase, "meta": ckpt.meta, "tensors": entries}).encode()
    body = MAGIC + struct.pack("<IQ", ckpt.version, len(header)) + header + b"".join(chunks)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    """Read and fully verify a checkpoint; raises IntegrityError on any damage."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 + 32 or raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint or truncated header")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise IntegrityError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        header = json.loads(body[16 : 16 + hlen])
    except ValueError as e:
        raise IntegrityError(f"{path}: unreadable header") from e
    payload = body[16 + hlen :]
    tensors = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise IntegrityError(f"{path}: tensor {e['name']} extends past payload")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return Checkpoint(header["phase"], tensors, header["meta"], version)

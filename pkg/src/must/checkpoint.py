"""MUSTCKPT container: named tensors plus JSON metadata.

Layout (little-endian)::

    b"MUSTCKPT" | u32 version | u64 header length | header JSON | payload

The header holds ``tensors`` (name, shape, dtype, offset, nbytes) and free
form ``meta``. Offsets are relative to the payload start, packed back to back.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MUSTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "uint8": (torch.uint8, "|u1"),
    "int64": (torch.int64, "<i8"),
}
_BY_TORCH = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointFormatError(Exception):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


def config_hash(cfg: dict) -> str:
    """Stable under key reordering."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _BY_TORCH:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        code = _BY_TORCH[t.dtype]
        raw = t.numpy().astype(_DTYPES[code][1], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": code,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointFormatError("file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointFormatError("truncated header")
    header = json.loads(blob[_PREFIX.size:start].decode())
    payload = memoryview(blob)[start:]
    tensors, cursor = {}, 0
    for e in header["tensors"]:
        if e["offset"] != cursor:
            raise CheckpointFormatError(f"manifest offsets overlap or leave gaps at {e['name']}")
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointFormatError(f"payload truncated in {e['name']}")
        tdtype, npdtype = _DTYPES[e["dtype"]]
        arr = np.frombuffer(payload[e["offset"]:end], dtype=npdtype).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy()).to(tdtype)
        cursor = end
    if cursor != len(payload):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return tensors, header["meta"]

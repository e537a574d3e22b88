"""Self-describing checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"CLAPCKPT"
    offset 8   uint32    format version
    offset 12  uint64    header length N
    offset 20  N bytes   UTF-8 JSON header
    offset 20+N          data section

The header is ``{"format_version", "metadata", "tensors"}`` where each tensor
entry is ``{"path", "dtype", "shape", "offset", "nbytes"}`` and ``offset`` is
relative to the start of the data section. Tensor payloads are raw
little-endian C-order values, so a round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MAGIC = b"CLAPCKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


def _to_numpy(t: torch.Tensor) -> tuple[str, np.ndarray]:
    arr = t.detach().cpu().contiguous().numpy()
    name = str(arr.dtype)
    if name not in _DTYPES:
        raise DataError(f"unsupported tensor dtype {name}")
    return name, arr.astype(_DTYPES[name], copy=False)


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, torch.Tensor], metadata: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for key in sorted(tensors):
        dtype, arr = _to_numpy(tensors[key])
        raw = arr.tobytes(order="C")
        entries.append({"path": key, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "metadata": metadata or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREAMBLE.size:
        raise DataError(f"{path}: truncated checkpoint preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    start = _PREAMBLE.size + hlen
    if len(data) < start:
        raise DataError(f"{path}: truncated checkpoint header")
    header = json.loads(data[_PREAMBLE.size:start].decode("utf-8"))
    tensors = {}
    for e in header["tensors"]:
        lo, hi = start + e["offset"], start + e["offset"] + e["nbytes"]
        if hi > len(data):
            raise DataError(f"{path}: truncated payload for {e['path']}")
        arr = np.frombuffer(data, dtype=_DTYPES[e["dtype"]], count=e["nbytes"] // _DTYPES[e["dtype"]].itemsize,
                            offset=lo).reshape(e["shape"])
        tensors[e["path"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return tensors, header["metadata"]

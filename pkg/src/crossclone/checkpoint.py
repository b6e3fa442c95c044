"""Self-describing binary checkpoint container.

Layout: magic, format version, a sorted-keys JSON meta blob, a name-sorted
tensor section (dtype + shape + raw little-endian bytes each), then a SHA-256
digest of everything before it. Writing is fully deterministic, so
save -> load -> save is byte-stable, and any truncation or bit flip fails the
checksum before any state is handed back.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"XCCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (np.dtype("<f4"), torch.float32),
    "float64": (np.dtype("<f8"), torch.float64),
    "int64": (np.dtype("<i8"), torch.int64),
}


def _dtype_name(tensor: torch.Tensor) -> str:
    name = str(tensor.dtype).removeprefix("torch.")
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {name}")
    return name


def save_checkpoint(meta: dict, tensors: dict[str, torch.Tensor], path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        dtype_name = _dtype_name(tensor)
        np_dtype, _ = _DTYPES[dtype_name]
        raw = tensor.numpy().astype(np_dtype, copy=False).tobytes()
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        dt_bytes = dtype_name.encode("utf-8")
        buf.write(struct.pack("<I", len(dt_bytes)))
        buf.write(dt_bytes)
        buf.write(struct.pack("<I", tensor.dim()))
        for dim in tensor.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + 32:
        raise CheckpointError("checkpoint file is truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    view = io.BytesIO(body)
    if view.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", view.read(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"incompatible checkpoint version {version} (expected {FORMAT_VERSION})"
        )
    (meta_len,) = struct.unpack("<Q", view.read(8))
    meta = json.loads(view.read(meta_len).decode("utf-8"))
    (n_tensors,) = struct.unpack("<I", view.read(4))
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", view.read(4))
        name = view.read(name_len).decode("utf-8")
        (dt_len,) = struct.unpack("<I", view.read(4))
        dtype_name = view.read(dt_len).decode("utf-8")
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype_name}")
        np_dtype, torch_dtype = _DTYPES[dtype_name]
        (ndim,) = struct.unpack("<I", view.read(4))
        shape = tuple(struct.unpack("<Q", view.read(8))[0] for _ in range(ndim))
        (raw_len,) = struct.unpack("<Q", view.read(8))
        raw = view.read(raw_len)
        array = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(array).to(torch_dtype)
    return meta, tensors

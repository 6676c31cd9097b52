"""Versioned binary container for named parameter tensors plus configuration.

Layout: ``MAGIC | u32 version | u64 header length | JSON header | raw tensor bytes``.
Tensor bytes are little-endian and laid out in header order. The header is
written with sorted keys, so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig

MAGIC = b"PASMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: dict, config: ModelConfig, meta: dict | None = None) -> bytes:
    index, blobs, offset = [], [], 0
    for name, tensor in params.items():
        arr = tensor.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": dataclasses.asdict(config), "meta": meta or {}, "tensors": index}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(blobs)


def loads(data: bytes):
    """Return ``(params, config, meta)``; params map names to float tensors."""
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    fixed = len(MAGIC) + 12
    if len(data) < fixed:
        raise CheckpointError("checkpoint truncated")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC) : fixed])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if len(data) < fixed + hlen:
        raise CheckpointError("checkpoint truncated")
    header = json.loads(data[fixed : fixed + hlen])
    body = memoryview(data)[fixed + hlen :]
    params = {}
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(body):
            raise CheckpointError(f"checkpoint truncated inside tensor {t['name']}")
        arr = np.frombuffer(body[t["offset"] : end], dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        params[t["name"]] = torch.from_numpy(arr.copy())
    return params, ModelConfig(**header["config"]), header["meta"]


def save(path, model, meta: dict | None = None) -> bytes:
    data = dumps(dict(model.state_dict()), model.config, meta)
    if path is not None:
        Path(path).write_bytes(data)
    return data


def load_model(source, seed: int = 0):
    """Rebuild an :class:`AssemblyNet` from a path or raw checkpoint bytes; returns ``(model, meta)``."""
    from .model import AssemblyNet

    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    params, config, meta = loads(bytes(data))
    model = AssemblyNet(config, seed=seed)
    missing = set(model.state_dict()) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    model.load_state_dict(params)
    return model, meta


def param_hash(params) -> str:
    """Digest of named tensors, for freeze checks."""
    h = hashlib.sha256()
    items = params.items() if isinstance(params, dict) else params
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()

"""Binary dataset container with per-record checksums and a JSON manifest.

File layout::

    b"PASMDATA" | u32 version | u32 record count
    record*  = u32 payload length | u32 crc32(payload) | payload

A payload starts with a JSON header (length-prefixed) describing the sample,
followed by its part clouds as little-endian float32 and its poses and contact
points as little-endian float64.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import Counter
from pathlib import Path

import numpy as np

from .encoding import EquivalencePartition
from .geometry import Pose
from .synthetic import AssemblySample, ContactPair

MAGIC = b"PASMDATA"
VERSION = 1
_HEAD = struct.Struct("<II")
_REC = struct.Struct("<II")


class DatasetError(ValueError):
    pass


class VersionError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class ChecksumError(DatasetError):
    def __init__(self, index: int):
        super().__init__(f"checksum mismatch in record {index}")
        self.index = index


def _encode(s: AssemblySample) -> bytes:
    n_pc = s.parts[0].shape[0]
    header = {
        "id": s.id,
        "category": s.category,
        "split": s.split,
        "n_parts": s.n_parts,
        "n_pc": n_pc,
        "classes": [list(c) for c in s.partition.classes],
        "contacts": [[c.i, c.j, c.index_i, c.index_j] for c in s.contacts],
        "adjacency": [list(a) for a in s.adjacency],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    points = np.stack(s.parts).astype("<f4", copy=False).tobytes()
    poses = np.stack([p.to_vector() for p in s.gt_poses]).astype("<f8").tobytes()
    cpts = np.asarray([np.concatenate([c.c_ij, c.c_ji]) for c in s.contacts], dtype="<f8").reshape(-1, 6).tobytes()
    return struct.pack("<I", len(head)) + head + points + poses + cpts


def _decode(payload: bytes) -> AssemblySample:
    (hlen,) = struct.unpack_from("<I", payload)
    h = json.loads(payload[4 : 4 + hlen])
    off = 4 + hlen
    n, k, c = h["n_parts"], h["n_pc"], len(h["contacts"])
    pts = np.frombuffer(payload, "<f4", n * k * 3, off).reshape(n, k, 3).astype(np.float32)
    off += n * k * 3 * 4
    poses = np.frombuffer(payload, "<f8", n * 7, off).reshape(n, 7)
    off += n * 7 * 8
    cpts = np.frombuffer(payload, "<f8", c * 6, off).reshape(c, 6)
    contacts = [
        ContactPair(i, j, ii, jj, cpts[r, :3].copy(), cpts[r, 3:].copy())
        for r, (i, j, ii, jj) in enumerate(h["contacts"])
    ]
    return AssemblySample(
        id=h["id"],
        category=h["category"],
        parts=[pts[i].copy() for i in range(n)],
        gt_poses=[Pose.from_vector(v) for v in poses],
        partition=EquivalencePartition(tuple(tuple(cl) for cl in h["classes"])),
        contacts=contacts,
        split=h["split"],
        adjacency=tuple(tuple(a) for a in h["adjacency"]),
    )


def dumps(samples) -> bytes:
    samples = list(samples)
    out = [MAGIC, _HEAD.pack(VERSION, len(samples))]
    for s in samples:
        payload = _encode(s)
        out.append(_REC.pack(len(payload), zlib.crc32(payload)))
        out.append(payload)
    return b"".join(out)


def loads(data: bytes) -> list[AssemblySample]:
    """Parse a whole container; any damage raises before a sample is returned."""
    if data[: len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise TruncatedError("dataset header truncated")
        raise DatasetError("not a dataset file")
    off = len(MAGIC)
    if len(data) < off + _HEAD.size:
        raise TruncatedError("dataset header truncated")
    version, count = _HEAD.unpack_from(data, off)
    if version != VERSION:
        raise VersionError(f"dataset version {version} is not supported (expected {VERSION})")
    off += _HEAD.size
    out = []
    for index in range(count):
        if len(data) < off + _REC.size:
            raise TruncatedError(f"dataset truncated before record {index}")
        length, crc = _REC.unpack_from(data, off)
        off += _REC.size
        payload = data[off : off + length]
        if len(payload) < length:
            raise TruncatedError(f"dataset truncated inside record {index}")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(index)
        out.append(_decode(payload))
        off += length
    if off != len(data):
        raise DatasetError(f"{len(data) - off} trailing bytes after the last record")
    return out


def manifest(samples) -> dict:
    samples = list(samples)
    return {
        "version": VERSION,
        "count": len(samples),
        "splits": dict(sorted(Counter(s.split for s in samples).items())),
        "categories": dict(sorted(Counter(s.category for s in samples).items())),
        "by_split_category": dict(sorted(Counter(f"{s.split}/{s.category}" for s in samples).items())),
    }


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save(path, samples) -> None:
    samples = list(samples)
    Path(path).write_bytes(dumps(samples))
    manifest_path(path).write_text(json.dumps(manifest(samples), indent=2, sort_keys=True) + "\n")


def load(path, split: str | None = None) -> list[AssemblySample]:
    samples = loads(Path(path).read_bytes())
    return samples if split is None else [s for s in samples if s.split == split]

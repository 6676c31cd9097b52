"""Padding samples into dense tensors and seeding noise."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .config import ModelConfig
from .encoding import code_matrix


@dataclass
class Batch:
    points: torch.Tensor  # (B, P, n, 3)
    codes: torch.Tensor  # (B, P, 2 * max_parts)
    mask: torch.Tensor  # (B, P) bool
    gt: torch.Tensor  # (B, P, 7)
    classes: list  # per-sample tuple of index tuples
    samples: list

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def n_parts(self) -> list[int]:
        return [int(n) for n in self.mask.sum(dim=1)]

    def repeat(self, times: int) -> "Batch":
        """Tile the batch ``times`` over, branch-major."""
        return Batch(
            self.points.repeat(times, 1, 1, 1),
            self.codes.repeat(times, 1, 1),
            self.mask.repeat(times, 1),
            self.gt.repeat(times, 1, 1),
            self.classes * times,
            self.samples * times,
        )


def collate(samples, config: ModelConfig, pad_to: int | None = None, dtype=None) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty batch")
    dtype = dtype or (torch.float64 if config.dtype == "float64" else torch.float32)
    P = max(s.n_parts for s in samples) if pad_to is None else pad_to
    if P > config.max_parts:
        raise ValueError(f"{P} part slots exceed max_parts={config.max_parts}")
    n = samples[0].parts[0].shape[0]
    B = len(samples)
    points = np.zeros((B, P, n, 3))
    codes = np.zeros((B, P, 2 * config.max_parts))
    mask = np.zeros((B, P), dtype=bool)
    gt = np.tile(np.array([1.0, 0, 0, 0, 0, 0, 0]), (B, P, 1))
    for b, s in enumerate(samples):
        N = s.n_parts
        if N > P:
            raise ValueError(f"sample {s.id} has {N} parts, more than {P} slots")
        if any(p.shape[0] != n for p in s.parts):
            raise ValueError("all parts in a batch must have the same point count")
        points[b, :N] = np.stack(s.parts)
        codes[b, :N] = code_matrix(s.partition, N, config.max_parts)
        mask[b, :N] = True
        gt[b, :N] = np.stack([p.to_vector() for p in s.gt_poses])
    return Batch(
        torch.as_tensor(points, dtype=dtype),
        torch.as_tensor(codes, dtype=dtype),
        torch.as_tensor(mask),
        torch.as_tensor(gt, dtype=dtype),
        [s.partition.classes for s in samples],
        list(samples),
    )


def sample_key(sample_id: str) -> int:
    return zlib.crc32(sample_id.encode())


def noise_for(sample_id: str, n_parts: int, noise_dim: int, seed: int, epoch: int, branch: int) -> np.ndarray:
    """Per-part N(0, 1) noise keyed on (seed, epoch, sample, branch)."""
    rng = np.random.default_rng([int(seed), int(epoch), sample_key(sample_id), int(branch)])
    return rng.standard_normal((n_parts, noise_dim))


def batch_noise(batch: Batch, noise_dim: int, seed: int, epoch: int, branches) -> torch.Tensor:
    """Noise for ``batch`` tiled over ``branches`` (branch-major), shape ``(len(branches) * B, P, z)``."""
    B, P = batch.mask.shape
    out = np.zeros((len(branches) * B, P, noise_dim))
    for k, br in enumerate(branches):
        for b, s in enumerate(batch.samples):
            out[k * B + b, : s.n_parts] = noise_for(s.id, s.n_parts, noise_dim, seed, epoch, br)
    return torch.as_tensor(out, dtype=batch.points.dtype)

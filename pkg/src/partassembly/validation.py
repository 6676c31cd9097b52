"""Input checks shared by the estimator, CLI and training entry points."""

from __future__ import annotations

import numbers

import numpy as np

from .config import ModelConfig
from .encoding import cluster_equivalent
from .geometry import Pose
from .synthetic import AssemblySample


def check_cloud(cloud, n_pc: int | None = None, name: str = "cloud") -> np.ndarray:
    arr = np.asarray(cloud, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if n_pc is not None and arr.shape[0] != n_pc:
        raise ValueError(f"{name} has {arr.shape[0]} points; expected {n_pc}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_poses(poses, n_parts: int | None = None) -> np.ndarray:
    """``(N, 7)`` array of unit-quaternion-plus-translation poses."""
    arr = np.asarray([p.to_vector() if isinstance(p, Pose) else p for p in poses], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 7:
        raise ValueError(f"poses must have shape (N, 7), got {arr.shape}")
    if n_parts is not None and arr.shape[0] != n_parts:
        raise ValueError(f"expected {n_parts} poses, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError("poses contain non-finite values")
    norms = np.linalg.norm(arr[:, :4], axis=1)
    if np.any(np.abs(norms - 1) > 1e-6):
        raise ValueError("pose quaternions must have unit norm")
    return arr


def check_probability(p, name: str = "p", upper_open: bool = True) -> float:
    if not isinstance(p, numbers.Real) or not np.isfinite(p):
        raise ValueError(f"{name} must be a finite number")
    if p < 0 or (p >= 1 if upper_open else p > 1):
        raise ValueError(f"{name} must lie in [0, 1{')' if upper_open else ']'}, got {p}")
    return float(p)


def check_positive_int(k, name: str) -> int:
    if isinstance(k, bool) or not isinstance(k, numbers.Integral) or k < 1:
        raise ValueError(f"{name} must be a positive integer, got {k!r}")
    return int(k)


def _from_parts(index: int, parts, n_pc: int | None) -> AssemblySample:
    clouds = [check_cloud(c, n_pc, f"shape {index} part {i}").astype(np.float32) for i, c in enumerate(parts)]
    if not clouds:
        raise ValueError(f"shape {index} has no parts")
    return AssemblySample(
        id=f"input-{index:05d}",
        category="unknown",
        parts=clouds,
        gt_poses=[Pose.identity() for _ in clouds],
        partition=cluster_equivalent(clouds),
        contacts=[],
        split="test",
    )


def check_samples(X, config: ModelConfig | None = None, min_parts: int = 1) -> list[AssemblySample]:
    """Accept samples, or bare lists of canonical part clouds, and check them against ``config``.

    Bare clouds get identity placeholder poses and a partition from
    bounding-box clustering; they are fine for prediction but not for scoring.
    """
    if isinstance(X, AssemblySample):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one shape")
    n_pc = None if config is None else config.n_pc
    out = []
    for index, x in enumerate(X):
        s = x if isinstance(x, AssemblySample) else _from_parts(index, x, n_pc)
        if s.n_parts < min_parts:
            raise ValueError(f"shape {s.id} has {s.n_parts} parts; at least {min_parts} required")
        if config is not None:
            if s.n_parts > config.max_parts:
                raise ValueError(f"shape {s.id} has {s.n_parts} parts; model max_parts={config.max_parts}")
            for i, p in enumerate(s.parts):
                if p.shape != (config.n_pc, 3):
                    raise ValueError(f"shape {s.id} part {i} has shape {p.shape}; expected ({config.n_pc}, 3)")
        out.append(s)
    return out


def has_ground_truth(samples) -> bool:
    return all(s.category != "unknown" for s in samples)

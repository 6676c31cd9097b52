"""Geometric-equivalence clustering and instance codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import aabb_of

DEFAULT_THRESHOLD = 0.1
MAX_PARTS = 20


@dataclass(frozen=True)
class EquivalencePartition:
    classes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        classes = tuple(tuple(int(i) for i in c) for c in self.classes)
        if not classes or any(len(c) == 0 for c in classes):
            raise ValueError("partition needs at least one non-empty class")
        flat = [i for c in classes for i in c]
        if len(set(flat)) != len(flat):
            raise ValueError("partition classes overlap")
        if sorted(flat) != list(range(len(flat))):
            raise ValueError("partition must cover parts 0..N-1 exactly")
        object.__setattr__(self, "classes", classes)

    @property
    def n_parts(self) -> int:
        return sum(len(c) for c in self.classes)

    def class_of(self) -> np.ndarray:
        """Class index for every part."""
        out = np.empty(self.n_parts, dtype=np.int64)
        for k, members in enumerate(self.classes):
            out[list(members)] = k
        return out

    def restrict(self, keep) -> "EquivalencePartition":
        """Partition over the kept parts, renumbered in ``keep`` order."""
        pos = {int(old): new for new, old in enumerate(keep)}
        classes = [tuple(sorted(pos[i] for i in c if i in pos)) for c in self.classes]
        classes = sorted((c for c in classes if c), key=min)
        return EquivalencePartition(tuple(classes))


@dataclass(frozen=True)
class InstanceCode:
    v_inter: np.ndarray
    v_intra: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.v_inter, self.v_intra])


def cluster_equivalent(clouds, threshold: float = DEFAULT_THRESHOLD) -> EquivalencePartition:
    """Group parts whose canonical box extents differ by less than ``threshold``.

    Greedy first fit in input order: a part joins the first class whose first
    member is within ``threshold`` (L-infinity over the three extents), so the
    relation is not transitive near the threshold.
    """
    if len(clouds) == 0:
        raise ValueError("cluster_equivalent needs at least one part")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    extents = [aabb_of(c).extent for c in clouds]
    classes: list[list[int]] = []
    for i, ext in enumerate(extents):
        for members in classes:
            if np.max(np.abs(ext - extents[members[0]])) < threshold:
                members.append(i)
                break
        else:
            classes.append([i])
    return EquivalencePartition(tuple(tuple(c) for c in classes))


def _one_hot(i: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[i] = 1.0
    return v


def instance_encode(partition: EquivalencePartition, n_parts: int, max_parts: int = MAX_PARTS) -> list[InstanceCode]:
    if n_parts > max_parts:
        raise ValueError(f"{n_parts} parts exceed max_parts={max_parts}")
    codes = []
    for i in range(n_parts):
        for k, members in enumerate(partition.classes):
            if i in members:
                codes.append(InstanceCode(_one_hot(i, max_parts), _one_hot(k, max_parts)))
                break
        else:
            raise ValueError(f"part {i} is not covered by the partition")
    return codes


def code_matrix(partition: EquivalencePartition, n_parts: int, max_parts: int = MAX_PARTS) -> np.ndarray:
    """Stacked ``[v_inter | v_intra]`` rows, shape ``(n_parts, 2 * max_parts)``."""
    return np.stack([c.vector() for c in instance_encode(partition, n_parts, max_parts)])

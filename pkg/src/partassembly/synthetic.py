"""Procedural furniture generator with known poses, classes and contacts.

Parts are boxes and cylinders sampled on their surfaces. Every construction
contact is inserted as an explicit point into both touching parts, so the
ground-truth contact gap is zero up to float32 rounding. Interchangeable
parts (legs, arms, stretchers) share one canonical cloud and differ only in
their poses. Part order is shuffled per sample unless ``spec.shuffle`` is off.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .config import GeneratorSpec
from .encoding import EquivalencePartition, cluster_equivalent
from .geometry import Pose, apply_pose, compose, fps, matrix_to_quat, pca_canonicalize, pairwise_sq_dists

CATEGORIES = ("chair", "table", "lamp")
MAX_PARTS = 20
CONTACT_TAU = 0.05

DEFAULT_RANGES = {
    "chair": {
        "seat_width": (0.40, 0.60),
        "seat_depth": (0.40, 0.60),
        "seat_thickness": (0.03, 0.08),
        "leg_length": (0.35, 0.50),
        "leg_width": (0.03, 0.07),
        "back_height": (0.30, 0.60),
        "back_thickness": (0.03, 0.06),
        "back_tilt": (0.0, 15.0),
        "arm_height": (0.15, 0.25),
        "arm_width": (0.03, 0.06),
        "arm_count": (0, 2),
    },
    "table": {
        "top_width": (0.80, 1.40),
        "top_depth": (0.50, 0.90),
        "top_thickness": (0.03, 0.06),
        "leg_length": (0.50, 0.75),
        "leg_width": (0.04, 0.08),
        "stretcher_height": (0.10, 0.30),
        "stretcher_count": (0, 2),
    },
    "lamp": {
        "base_radius": (0.12, 0.20),
        "base_height": (0.02, 0.05),
        "pole_radius": (0.01, 0.02),
        "pole_length": (0.40, 0.80),
        "shade_radius": (0.10, 0.25),
        "shade_height": (0.10, 0.25),
    },
}


@dataclass(frozen=True)
class ContactPair:
    """Contact between parts ``i < j``; points are canonical-space points of each part."""

    i: int
    j: int
    index_i: int
    index_j: int
    c_ij: np.ndarray
    c_ji: np.ndarray


@dataclass
class AssemblySample:
    id: str
    category: str
    parts: list
    gt_poses: list
    partition: EquivalencePartition
    contacts: list
    split: str
    adjacency: tuple = ()

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def world_parts(self, poses=None) -> list:
        poses = self.gt_poses if poses is None else poses
        return [apply_pose(p, c) for p, c in zip(poses, self.parts)]


def split_of(sample_id: str) -> str:
    """70/10/20 train/val/test bucket from a stable hash of the id."""
    bucket = int.from_bytes(hashlib.blake2b(sample_id.encode(), digest_size=8).digest(), "little") % 100
    if bucket < 70:
        return "train"
    return "val" if bucket < 80 else "test"


# -- primitive surface sampling -------------------------------------------------

def sample_box(size, n: int, rng: np.random.Generator) -> np.ndarray:
    sx, sy, sz = (float(s) for s in size)
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([sx, sy, sz])
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    u[np.arange(n), axis] = sign * np.array([sx, sy, sz])[axis] / 2
    return u


def sample_cylinder(radius: float, height: float, n: int, rng: np.random.Generator, top=True, bottom=True) -> np.ndarray:
    """Cylinder along y, centred at the origin."""
    cap = np.pi * radius**2
    areas = np.array([2 * np.pi * radius * height, cap if top else 0.0, cap if bottom else 0.0])
    kind = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(kind == 0, radius, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    y = np.where(kind == 0, rng.uniform(-height / 2, height / 2, size=n), np.where(kind == 1, height / 2, -height / 2))
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def _rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])


def _rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])


@dataclass
class _Proto:
    """Local geometry shared by interchangeable parts."""

    dense: np.ndarray
    anchors: list = field(default_factory=list)


@dataclass
class _Placed:
    proto: str
    rotation: np.ndarray
    center: np.ndarray


class _Builder:
    def __init__(self):
        self.protos: dict[str, _Proto] = {}
        self.parts: list[_Placed] = []
        self.contacts: list[tuple[int, int, int, int]] = []

    def proto(self, name, dense):
        self.protos[name] = _Proto(dense)

    def place(self, proto, center, rotation=None) -> int:
        rot = np.eye(3) if rotation is None else rotation
        self.parts.append(_Placed(proto, rot, np.asarray(center, dtype=np.float64)))
        return len(self.parts) - 1

    def _anchor(self, part: int, world) -> int:
        placed = self.parts[part]
        local = placed.rotation.T @ (np.asarray(world, dtype=np.float64) - placed.center)
        proto = self.protos[placed.proto]
        for k, a in enumerate(proto.anchors):
            if np.allclose(a, local, atol=1e-9):
                return k
        proto.anchors.append(local)
        return len(proto.anchors) - 1

    def touch(self, a: int, b: int, world):
        """Record a contact; shared prototypes must see identical local anchors."""
        self.contacts.append((a, self._anchor(a, world), b, self._anchor(b, world)))

    def permute(self, order):
        """Reorder parts so that new part ``k`` is old part ``order[k]``."""
        new = {int(old): k for k, old in enumerate(order)}
        self.parts = [self.parts[i] for i in order]
        self.contacts = [(new[a], ka, new[b], kb) for a, ka, b, kb in self.contacts]


def _u(rng, ranges, key):
    lo, hi = ranges[key]
    return float(rng.uniform(lo, hi))


def _build_chair(rng, r, dense) -> _Builder:
    b = _Builder()
    sw, sd, st = _u(rng, r, "seat_width"), _u(rng, r, "seat_depth"), _u(rng, r, "seat_thickness")
    lh, lw = _u(rng, r, "leg_length"), _u(rng, r, "leg_width")
    bh, bt, tilt = _u(rng, r, "back_height"), _u(rng, r, "back_thickness"), _u(rng, r, "back_tilt")
    lo, hi = r["arm_count"]
    n_arms = int(rng.integers(int(lo), int(hi) + 1))
    ah, aw = _u(rng, r, "arm_height"), _u(rng, r, "arm_width")

    b.proto("seat", sample_box((sw, st, sd), dense, rng))
    b.proto("back", sample_box((sw, bh, bt), dense, rng))
    b.proto("leg", sample_box((lw, lh, lw), dense, rng))
    seat_y = lh + st / 2
    seat = b.place("seat", (0, seat_y, 0))
    # back pivots about its bottom-centre on the rear of the seat
    pivot = np.array([0.0, lh + st, -(sd / 2 - bt / 2)])
    rot = _rot_x(-tilt)
    back = b.place("back", pivot + rot @ np.array([0, bh / 2, 0]), rot)
    b.touch(seat, back, pivot)
    inset = lw / 2 + 0.01
    legs = []
    for sx, sz in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        x, z = sx * (sw / 2 - inset), sz * (sd / 2 - inset)
        legs.append(b.place("leg", (x, lh / 2, z)))
        b.touch(seat, legs[-1], (x, lh, z))
    if n_arms:
        arm_len = 0.6 * sd
        b.proto("arm", sample_box((aw, ah, arm_len), dense, rng))
        for sx in (1, -1)[:n_arms]:
            x = sx * (sw / 2 - aw / 2)
            arm = b.place("arm", (x, lh + st + ah / 2, 0.0))
            b.touch(seat, arm, (x, lh + st, 0.0))
    return b


def _build_table(rng, r, dense) -> _Builder:
    b = _Builder()
    tw, td, tt = _u(rng, r, "top_width"), _u(rng, r, "top_depth"), _u(rng, r, "top_thickness")
    lh, lw = _u(rng, r, "leg_length"), _u(rng, r, "leg_width")
    sh = _u(rng, r, "stretcher_height")
    lo, hi = r["stretcher_count"]
    n_str = int(rng.integers(int(lo), int(hi) + 1))
    b.proto("top", sample_box((tw, tt, td), dense, rng))
    b.proto("leg", sample_box((lw, lh, lw), dense, rng))
    top = b.place("top", (0, lh + tt / 2, 0))
    inset = lw / 2 + 0.02
    lx, lz = tw / 2 - inset, td / 2 - inset
    legs = {}
    for sx, sz in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        # back legs are the front leg turned half a revolution so side anchors line up
        rot = None if sz > 0 else _rot_y(180.0)
        legs[(sx, sz)] = b.place("leg", (sx * lx, lh / 2, sz * lz), rot)
        b.touch(top, legs[(sx, sz)], (sx * lx, lh, sz * lz))
    if n_str:
        st = 0.6 * lw
        length = 2 * lz - lw
        b.proto("stretcher", sample_box((st, st, length), dense, rng))
        for sx in (1, -1)[:n_str]:
            s = b.place("stretcher", (sx * lx, sh, 0.0))
            b.touch(legs[(sx, 1)], s, (sx * lx, sh, lz - lw / 2))
            b.touch(legs[(sx, -1)], s, (sx * lx, sh, -(lz - lw / 2)))
    return b


def _build_lamp(rng, r, dense) -> _Builder:
    b = _Builder()
    br, bh = _u(rng, r, "base_radius"), _u(rng, r, "base_height")
    pr, ph = _u(rng, r, "pole_radius"), _u(rng, r, "pole_length")
    sr, sh = _u(rng, r, "shade_radius"), _u(rng, r, "shade_height")
    b.proto("base", sample_cylinder(br, bh, dense, rng))
    b.proto("pole", sample_cylinder(pr, ph, dense, rng))
    b.proto("shade", sample_cylinder(sr, sh, dense, rng, top=True, bottom=False))
    base = b.place("base", (0, bh / 2, 0))
    pole = b.place("pole", (0, bh + ph / 2, 0))
    b.touch(base, pole, (0, bh, 0))
    top = bh + ph
    shade = b.place("shade", (0, top - sh / 2, 0))
    b.touch(pole, shade, (0, top, 0))
    return b


_BUILDERS = {"chair": _build_chair, "table": _build_table, "lamp": _build_lamp}


def validate_spec(spec: GeneratorSpec) -> dict:
    if spec.category not in CATEGORIES:
        raise ValueError(f"unknown category {spec.category!r}; choose from {CATEGORIES}")
    if spec.count < 1:
        raise ValueError("count must be >= 1")
    if spec.n_pc < 8:
        raise ValueError("n_pc must be >= 8")
    if spec.dense < spec.n_pc:
        raise ValueError("dense sample count must be >= n_pc")
    ranges = dict(DEFAULT_RANGES[spec.category])
    for key, value in (spec.ranges or {}).items():
        if key not in ranges:
            raise ValueError(f"unknown parameter range {key!r} for {spec.category}")
        lo, hi = (float(v) for v in value)
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid range for {key}: {value}")
        ranges[key] = (lo, hi)
    return ranges


def _assemble(builder: _Builder, spec: GeneratorSpec, rng, sample_id: str) -> tuple[AssemblySample, list]:
    # normalise the whole shape to a unit AABB centred at the origin
    world = [builder.protos[p.proto].dense @ p.rotation.T + p.center for p in builder.parts]
    allpts = np.concatenate(world)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    mid, scale = (lo + hi) / 2, float(np.max(hi - lo))

    canon: dict[str, tuple[np.ndarray, Pose]] = {}
    locals_: dict[str, np.ndarray] = {}
    for name, proto in builder.protos.items():
        n_anchor = len(proto.anchors)
        dense = proto.dense / scale
        keep = fps(dense, spec.n_pc - n_anchor, start=int(rng.integers(len(dense))))
        local = np.concatenate([dense[keep]] + [np.asarray(proto.anchors).reshape(-1, 3) / scale])
        locals_[name] = local
        cloud, frame = pca_canonicalize(local)
        canon[name] = (cloud.astype(np.float32), frame)

    parts, poses = [], []
    for placed in builder.parts:
        cloud, frame = canon[placed.proto]
        placement = Pose(matrix_to_quat(placed.rotation), (placed.center - mid) / scale)
        parts.append(cloud)
        poses.append(compose(placement, frame))

    adjacency = []
    for a, ka, b, kb in builder.contacts:
        ia = spec.n_pc - len(builder.protos[builder.parts[a].proto].anchors) + ka
        ib = spec.n_pc - len(builder.protos[builder.parts[b].proto].anchors) + kb
        adjacency.append((a, b, ia, ib) if a < b else (b, a, ib, ia))
    contacts = [
        ContactPair(i, j, ii, jj, parts[i][ii].copy(), parts[j][jj].copy()) for i, j, ii, jj in sorted(adjacency)
    ]
    sample = AssemblySample(
        id=sample_id,
        category=spec.category,
        parts=parts,
        gt_poses=poses,
        partition=cluster_equivalent(parts),
        contacts=contacts,
        split=split_of(sample_id),
        adjacency=tuple(sorted((i, j) for i, j, _, _ in adjacency)),
    )
    raw = [locals_[p.proto] @ p.rotation.T + (p.center - mid) / scale for p in builder.parts]
    return sample, raw


def generate_one(spec: GeneratorSpec, index: int, return_raw: bool = False):
    ranges = validate_spec(spec)
    rng = np.random.default_rng([spec.seed, index])
    builder = _BUILDERS[spec.category](rng, ranges, spec.dense)
    if len(builder.parts) > MAX_PARTS:
        raise ValueError("generated shape exceeds the part limit")
    if spec.shuffle:
        # separate stream: geometry matches the unshuffled sample exactly
        builder.permute(np.random.default_rng([spec.seed, index, 1]).permutation(len(builder.parts)))
    sample, raw = _assemble(builder, spec, rng, f"{spec.category}-{spec.seed}-{index:05d}")
    return (sample, raw) if return_raw else sample


def generate(spec: GeneratorSpec, count: int | None = None) -> list[AssemblySample]:
    """Deterministic list of samples for ``spec`` (``count`` overrides ``spec.count``)."""
    count = spec.count if count is None else count
    validate_spec(spec)
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate_one(spec, i) for i in range(count)]


def find_contacts(parts, poses, adjacency=None, tau: float = CONTACT_TAU) -> list[ContactPair]:
    """Contact points between connected parts in ground-truth world space.

    ``adjacency`` lists connected pairs; without it every pair whose clouds
    come closer than ``tau`` counts as connected.
    """
    world = [apply_pose(p, c) for p, c in zip(poses, parts)]
    if adjacency is None:
        pairs = [(i, j) for i in range(len(parts)) for j in range(i + 1, len(parts))]
    else:
        pairs = sorted({(min(i, j), max(i, j)) for i, j in adjacency})
    out = []
    for i, j in pairs:
        d = pairwise_sq_dists(world[i], world[j])
        if adjacency is None and d.min() >= tau**2:
            continue
        ii = int(np.argmin(d.min(axis=1)))
        jj = int(np.argmin(d.min(axis=0)))
        out.append(ContactPair(i, j, ii, jj, np.array(parts[i][ii]), np.array(parts[j][jj])))
    return out


def part_drop(sample: AssemblySample, p: float, seed: int) -> AssemblySample:
    """Drop each part with probability ``p``; at least one part always survives."""
    if not 0 <= p < 1:
        raise ValueError("drop probability must lie in [0, 1)")
    if p == 0:
        return sample
    return subset(sample, survivors(np.random.default_rng(seed), sample.n_parts, p))


RESAMPLE_LIMIT = 64


def survivors(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Indices kept when each of ``n`` items is dropped with probability ``p``.

    An all-dropped draw is resampled; after ``RESAMPLE_LIMIT`` failures (only
    plausible as ``p`` approaches 1) a single uniformly chosen item is kept.
    """
    for _ in range(RESAMPLE_LIMIT):
        keep = np.flatnonzero(rng.uniform(size=n) >= p)
        if keep.size:
            return keep
    return np.array([int(rng.integers(n))])


def subset(sample: AssemblySample, keep) -> AssemblySample:
    """Sample restricted to the parts in ``keep`` with re-derived classes and contacts."""
    keep = [int(k) for k in keep]
    pos = {old: new for new, old in enumerate(keep)}
    parts = [sample.parts[k] for k in keep]
    contacts = [
        ContactPair(pos[c.i], pos[c.j], c.index_i, c.index_j, c.c_ij, c.c_ji)
        for c in sample.contacts
        if c.i in pos and c.j in pos
    ]
    adjacency = tuple((pos[i], pos[j]) for i, j in sample.adjacency if i in pos and j in pos)
    return replace(
        sample,
        parts=parts,
        gt_poses=[sample.gt_poses[k] for k in keep],
        partition=cluster_equivalent(parts),
        contacts=contacts,
        adjacency=adjacency,
    )

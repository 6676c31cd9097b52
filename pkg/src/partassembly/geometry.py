"""Point-cloud and SE(3) primitives.

Quaternions are stored as ``(w, x, y, z)`` with the canonical sign ``w >= 0``.
Part clouds are plain ``(n, 3)`` float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUAT_TOL = 1e-6
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R(x) + t`` with a unit quaternion rotation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
            raise ValueError("pose components must be finite")
        if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
            raise ValueError(f"rotation quaternion is not unit norm (|q|={np.linalg.norm(q):.3g})")
        object.__setattr__(self, "rotation", canonical_quat(q))
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(IDENTITY_QUAT.copy(), np.zeros(3))

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:4], vec[4:7])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def inverse(self) -> "Pose":
        q_inv = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q_inv, -quat_to_matrix(q_inv) @ self.translation)


def canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0 else q.copy()


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(p, q) -> np.ndarray:
    """Hamilton product ``p * q`` (rotate by ``q`` first, then ``p``)."""
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical-sign unit quaternion."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return canonical_quat(q / np.linalg.norm(q))


def random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return canonical_quat(q / np.linalg.norm(q))


def compose(a: Pose, b: Pose) -> Pose:
    """Pose equal to applying ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    return Pose(q / np.linalg.norm(q), a.matrix @ b.translation + a.translation)


def _as_cloud(points, name="cloud") -> np.ndarray:
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return pts


def aabb_of(cloud) -> Aabb:
    pts = _as_cloud(cloud)
    return Aabb(pts.min(axis=0).astype(np.float64), pts.max(axis=0).astype(np.float64))


def apply_pose(pose: Pose, cloud) -> np.ndarray:
    pts = _as_cloud(cloud).astype(np.float64)
    return pts @ pose.matrix.T + pose.translation


def fps(cloud, k: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Furthest point sampling.

    The first index is ``start`` when given, otherwise drawn from ``seed``.
    Ties on the max-min distance resolve to the lowest index (``argmax``).
    """
    pts = _as_cloud(cloud).astype(np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"fps needs 1 <= k <= n_points, got k={k}, n={n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def _principal_axes(centered: np.ndarray) -> np.ndarray:
    cov = centered.T @ centered / len(centered)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    scale = max(evals[0], 1e-300)
    axes = []
    i = 0
    # eigh returns an arbitrary basis inside degenerate eigenspaces; rebuild
    # those from the coordinate axes so the frame is deterministic
    while i < 3:
        j = i + 1
        while j < 3 and abs(evals[j] - evals[i]) <= 1e-9 * scale:
            j += 1
        if j - i == 1:
            axes.append(evecs[:, i])
        else:
            span = evecs[:, i:j]
            proj = span @ span.T
            for e in np.eye(3):
                if len(axes) == j:
                    break
                v = proj @ e
                for a in axes[i:]:
                    v = v - (v @ a) * a
                if np.linalg.norm(v) > 1e-6:
                    axes.append(v / np.linalg.norm(v))
        i = j
    return np.stack(axes[:2], axis=1), evals


def _orient(axis: np.ndarray, centered: np.ndarray) -> np.ndarray:
    proj = centered @ axis
    skew = np.sum(proj**3)
    if abs(skew) > 1e-12 * max(np.sum(np.abs(proj) ** 3), 1e-300):
        return axis if skew > 0 else -axis
    lead = int(np.argmax(np.abs(axis)))
    return axis if axis[lead] > 0 else -axis


def pca_canonicalize(cloud) -> tuple[np.ndarray, Pose]:
    """Center a cloud and rotate its principal axes onto x, y, z.

    Returns ``(canonical, pose)`` with ``apply_pose(pose, canonical) ~= cloud``.
    Axis signs follow the third moment of the projections; the third axis is
    always the cross product of the first two, which also covers planar input.
    """
    pts = _as_cloud(cloud).astype(np.float64)
    center = pts.mean(axis=0)
    centered = pts - center
    if np.max(np.abs(centered)) <= 1e-12 * max(1.0, np.max(np.abs(pts))):
        raise ValueError("cannot canonicalize a cloud of identical points")
    two, evals = _principal_axes(centered)
    a1 = _orient(two[:, 0], centered)
    a2 = two[:, 1] - (two[:, 1] @ a1) * a1
    if np.linalg.norm(a2) < 1e-9 or evals[1] <= 1e-12 * evals[0]:
        # rank-1 cloud: any perpendicular second axis, chosen deterministically
        e = np.eye(3)[int(np.argmin(np.abs(a1)))]
        a2 = e - (e @ a1) * a1
    a2 = _orient(a2 / np.linalg.norm(a2), centered)
    a3 = np.cross(a1, a2)
    rot = np.stack([a1, a2, a3], axis=1)
    q = matrix_to_quat(rot)
    # project with the quaternion's own matrix so the round trip is exact to fp
    canonical = centered @ quat_to_matrix(q)
    return canonical, Pose(q, center)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def chamfer(a, b) -> float:
    """Symmetric sum of squared nearest-neighbour distances."""
    a = _as_cloud(a, "a").astype(np.float64)
    b = _as_cloud(b, "b").astype(np.float64)
    d = pairwise_sq_dists(a, b)
    return float(d.min(axis=1).sum() + d.min(axis=0).sum())


def chamfer_naive(a, b) -> float:
    """Double-loop reference for :func:`chamfer`."""
    a = [tuple(map(float, p)) for p in _as_cloud(a, "a")]
    b = [tuple(map(float, p)) for p in _as_cloud(b, "b")]

    def sq(p, q):
        return (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2

    total = 0.0
    for p in a:
        total += min(sq(p, q) for q in b)
    for q in b:
        total += min(sq(p, q) for p in a)
    return total

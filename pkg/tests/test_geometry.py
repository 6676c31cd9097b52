import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from partassembly.geometry import (
    Pose,
    aabb_of,
    apply_pose,
    chamfer,
    chamfer_naive,
    compose,
    fps,
    matrix_to_quat,
    pca_canonicalize,
    quat_multiply,
    quat_to_matrix,
    random_quat,
)

coords = st.floats(-10, 10, allow_nan=False, width=64)
clouds = st.integers(1, 24).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))
seeds = st.integers(0, 2**31 - 1)


def rodrigues(q):
    """Rotation matrix from axis-angle, independent of the quaternion formula."""
    q = np.asarray(q, dtype=float)
    angle = 2 * np.arctan2(np.linalg.norm(q[1:]), q[0])
    if np.linalg.norm(q[1:]) < 1e-15:
        return np.eye(3)
    k = q[1:] / np.linalg.norm(q[1:])
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def pose_from_seed(seed):
    rng = np.random.default_rng(seed)
    return Pose(random_quat(rng), rng.uniform(-1, 1, 3))


# -- Pose -------------------------------------------------------------------------

def test_pose_rejects_non_unit_quaternion():
    with pytest.raises(ValueError, match="unit"):
        Pose(np.array([1.0, 0.1, 0, 0]), np.zeros(3))


def test_pose_rejects_non_finite_translation():
    with pytest.raises(ValueError):
        Pose(np.array([1.0, 0, 0, 0]), np.array([0, np.inf, 0]))


def test_pose_canonical_sign():
    p = Pose(np.array([-0.5, 0.5, 0.5, 0.5]), np.zeros(3))
    assert p.rotation[0] >= 0
    np.testing.assert_allclose(p.matrix, quat_to_matrix([0.5, -0.5, -0.5, -0.5]))


def test_pose_accepts_tolerance_boundary():
    q = np.array([1.0 + 5e-7, 0, 0, 0])
    assert Pose(q, np.zeros(3)).rotation[0] == pytest.approx(1.0 + 5e-7)


@given(seeds)
def test_inverse_undoes_pose(seed):
    p = pose_from_seed(seed)
    x = np.random.default_rng(seed + 1).normal(size=(5, 3))
    np.testing.assert_allclose(apply_pose(p.inverse(), apply_pose(p, x)), x, atol=1e-12)


# -- rotations ----------------------------------------------------------------------

def test_apply_pose_identity_example():
    assert np.array_equal(apply_pose(Pose.identity(), [[1.0, 2.0, 3.0]]), [[1.0, 2.0, 3.0]])


def test_apply_pose_half_turn_about_z():
    p = Pose(np.array([0.0, 0, 0, 1]), np.zeros(3))
    np.testing.assert_allclose(apply_pose(p, [[1.0, 2.0, 3.0]]), [[-1.0, -2.0, 3.0]], atol=1e-15)


@given(seeds)
def test_quat_matrix_matches_rodrigues_and_scipy(seed):
    q = random_quat(np.random.default_rng(seed))
    R = quat_to_matrix(q)
    np.testing.assert_allclose(R, rodrigues(q), atol=1e-12)
    np.testing.assert_allclose(R, Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix(), atol=1e-12)


@given(seeds)
def test_matrix_to_quat_round_trip(seed):
    q = random_quat(np.random.default_rng(seed))
    np.testing.assert_allclose(matrix_to_quat(quat_to_matrix(q)), q, atol=1e-12)


@given(seeds, seeds)
def test_composition_matches_matrix_product(s1, s2):
    p, q = random_quat(np.random.default_rng(s1)), random_quat(np.random.default_rng(s2))
    assert np.max(np.abs(quat_to_matrix(quat_multiply(p, q)) - quat_to_matrix(p) @ quat_to_matrix(q))) < 1e-9


@given(seeds, seeds)
def test_compose_applies_second_first(s1, s2):
    a, b = pose_from_seed(s1), pose_from_seed(s2)
    x = np.random.default_rng(s1 ^ s2).normal(size=(4, 3))
    np.testing.assert_allclose(apply_pose(compose(a, b), x), apply_pose(a, apply_pose(b, x)), atol=1e-12)


@given(seeds)
def test_apply_pose_is_an_isometry(seed):
    p = pose_from_seed(seed)
    x = np.random.default_rng(seed).normal(size=(2, 3))
    y = apply_pose(p, x)
    assert abs(np.linalg.norm(x[0] - x[1]) - np.linalg.norm(y[0] - y[1])) < 1e-9


@given(clouds)
def test_identity_pose_is_exact(cloud):
    assert np.array_equal(apply_pose(Pose.identity(), cloud), cloud)


# -- AABB -----------------------------------------------------------------------------

def test_aabb_examples():
    box = aabb_of([[0.0, 0, 0], [1, 2, 3]])
    assert np.array_equal(box.min, [0, 0, 0]) and np.array_equal(box.max, [1, 2, 3])
    box = aabb_of([[5.0, 5, 5]] * 4)
    assert np.array_equal(box.min, box.max)
    assert np.array_equal(box.extent, [0, 0, 0])


def test_aabb_matches_scan(rng):
    pts = rng.uniform(-1, 1, (100, 3))
    lo, hi = [np.inf] * 3, [-np.inf] * 3
    for p in pts:
        for a in range(3):
            lo[a], hi[a] = min(lo[a], p[a]), max(hi[a], p[a])
    box = aabb_of(pts)
    assert np.array_equal(box.min, lo) and np.array_equal(box.max, hi)


def test_aabb_empty_raises():
    with pytest.raises(ValueError, match="empty"):
        aabb_of(np.zeros((0, 3)))


# -- FPS ------------------------------------------------------------------------------

def test_fps_collinear_picks_extremes():
    line = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
    assert set(fps(line, 2, start=0)) == {0, 9}


def test_fps_full_and_single():
    pts = np.random.default_rng(0).normal(size=(12, 3))
    assert sorted(fps(pts, 12, start=3)) == list(range(12))
    assert list(fps(pts, 1, start=5)) == [5]


def test_fps_rejects_bad_k():
    with pytest.raises(ValueError):
        fps(np.zeros((4, 3)), 5)
    with pytest.raises(ValueError):
        fps(np.zeros((4, 3)), 0)


def fps_oracle(pts, k, start):
    chosen = [start]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(len(pts)):
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:  # strict: lowest index wins ties
                best, best_d = i, d
        chosen.append(best)
    return chosen


@given(seeds, st.integers(1, 15))
def test_fps_matches_greedy_oracle(seed, k):
    pts = np.random.default_rng(seed).integers(-3, 4, size=(15, 3)).astype(float)
    out = fps(pts, k, seed=seed)
    assert list(out) == fps_oracle(pts, k, int(out[0]))
    assert len(set(out.tolist())) == len(out) or np.unique(pts, axis=0).shape[0] < k
    assert np.array_equal(out, fps(pts, k, seed=seed))


# -- PCA ------------------------------------------------------------------------------

def test_pca_fixed_point_on_axis_aligned_box(rng):
    pts = rng.uniform(-1, 1, (400, 3)) * [3.0, 2.0, 1.0]
    pts -= pts.mean(axis=0)
    canon, pose = pca_canonicalize(pts)
    # already aligned, so the rotation is diagonal with +-1 entries
    np.testing.assert_allclose(np.abs(pose.matrix), np.eye(3), atol=0.05)
    np.testing.assert_allclose(pose.translation, 0, atol=1e-12)
    var = canon.var(axis=0)
    assert var[0] > var[1] > var[2]


def skewed_cloud(seed, n=64, planar=False):
    rng = np.random.default_rng(seed)
    pts = rng.gamma(2.0, 1.0, (n, 3)) * [3.0, 1.5, 0.5]
    if planar:
        pts[:, 2] = 0
    return pts


@given(seeds, st.booleans())
def test_pca_round_trip(seed, planar):
    pts = skewed_cloud(seed, planar=planar)
    canon, pose = pca_canonicalize(pts)
    assert np.max(np.abs(apply_pose(pose, canon) - pts)) < 1e-6
    np.testing.assert_allclose(canon.mean(axis=0), 0, atol=1e-9)
    R = pose.matrix
    np.testing.assert_allclose(R[:, 2], np.cross(R[:, 0], R[:, 1]), atol=1e-9)


@given(seeds)
def test_pca_recovers_canonical_after_rigid_motion(seed):
    canon, _ = pca_canonicalize(skewed_cloud(seed))
    moved = apply_pose(pose_from_seed(seed + 7), canon)
    again, _ = pca_canonicalize(moved)
    assert np.max(np.abs(again - canon)) < 1e-6


def test_pca_planar_third_axis_is_cross_product():
    pts = skewed_cloud(5, planar=True)
    canon, pose = pca_canonicalize(pts)
    np.testing.assert_allclose(canon[:, 2], 0, atol=1e-9)
    assert np.max(np.abs(apply_pose(pose, canon) - pts)) < 1e-6


def test_pca_identical_points_raise():
    with pytest.raises(ValueError, match="identical"):
        pca_canonicalize(np.ones((6, 3)))


def test_pca_variances_descend(rng):
    canon, _ = pca_canonicalize(rng.normal(size=(200, 3)) @ np.diag([0.2, 3.0, 1.0]))
    var = canon.var(axis=0)
    assert var[0] >= var[1] >= var[2]


# -- chamfer --------------------------------------------------------------------------

def test_chamfer_example():
    assert chamfer([[0.0, 0, 0], [1, 0, 0]], [[0.0, 0, 0], [2, 0, 0]]) == 2.0


@given(clouds)
def test_chamfer_self_is_zero(a):
    assert chamfer(a, a) == 0.0


@given(clouds, clouds)
def test_chamfer_symmetric_nonnegative_and_matches_naive(a, b):
    c = chamfer(a, b)
    assert c >= 0
    assert c == chamfer(b, a)
    assert abs(c - chamfer_naive(a, b)) <= 1e-12 * max(1.0, c)


def test_chamfer_zero_iff_mutually_covering():
    a = np.array([[0.0, 0, 0], [1, 1, 1]])
    assert chamfer(a, np.concatenate([a, a[::-1]])) == 0.0
    assert chamfer(a, a[:1]) > 0


def test_chamfer_empty_raises():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


def test_chamfer_naive_exhaustive_small():
    a = np.array([[0.0, 0, 0], [3, 0, 0]])
    b = np.array([[1.0, 0, 0]])
    # a->b: 1 + 4, b->a: 1
    assert chamfer_naive(a, b) == 6.0

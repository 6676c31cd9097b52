import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from partassembly.encoding import EquivalencePartition, cluster_equivalent, code_matrix, instance_encode


def box(ex, ey, ez, n=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5, 0.5, (n, 3)) * [ex, ey, ez] + 0.0


def exact_box(ex, ey, ez):
    """Eight corners, so the extent is exactly (ex, ey, ez)."""
    c = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    return c * [ex, ey, ez]


# -- partition ------------------------------------------------------------------------

def test_partition_validates_disjoint_and_complete():
    with pytest.raises(ValueError, match="overlap"):
        EquivalencePartition(((0, 1), (1, 2)))
    with pytest.raises(ValueError, match="cover"):
        EquivalencePartition(((0, 2),))
    with pytest.raises(ValueError):
        EquivalencePartition(())


def test_restrict_renumbers():
    p = EquivalencePartition(((0, 2, 3), (1,), (4,)))
    assert p.restrict([3, 4, 0]).classes == ((0, 2), (1,))


# -- clustering -----------------------------------------------------------------------

def test_four_legs_and_a_seat():
    legs = [exact_box(0.1, 0.1, 1.0) for _ in range(4)]
    seat = exact_box(1.0, 1.0, 0.1)
    assert cluster_equivalent(legs + [seat]).classes == ((0, 1, 2, 3), (4,))


def test_all_far_apart_gives_singletons():
    parts = [exact_box(1.0 + 0.5 * i, 1.0, 1.0) for i in range(5)]
    assert cluster_equivalent(parts).classes == tuple((i,) for i in range(5))


def test_first_fit_against_representative():
    parts = [exact_box(1.00, 1, 1), exact_box(1.05, 1, 1), exact_box(1.12, 1, 1)]
    # 1.12 is within 0.1 of 1.05 but not of the representative 1.00
    assert cluster_equivalent(parts, 0.1).classes == ((0, 1), (2,))


def test_cluster_rejects_empty_and_bad_threshold():
    with pytest.raises(ValueError):
        cluster_equivalent([])
    with pytest.raises(ValueError):
        cluster_equivalent([exact_box(1, 1, 1)], threshold=0)


def first_fit_oracle(extents, threshold):
    reps, classes = [], []
    for i, e in enumerate(extents):
        for k, r in enumerate(reps):
            if max(abs(a - b) for a, b in zip(e, r)) < threshold:
                classes[k].append(i)
                break
        else:
            reps.append(e)
            classes.append([i])
    return tuple(tuple(c) for c in classes)


@given(st.lists(st.tuples(*[st.sampled_from([0.5, 0.52, 0.8, 1.0, 1.3])] * 3), min_size=1, max_size=10))
def test_cluster_matches_oracle(extents):
    parts = [exact_box(*e) for e in extents]
    assert cluster_equivalent(parts, 0.1).classes == first_fit_oracle(extents, 0.1)


@given(st.lists(st.sampled_from([0.5, 1.0, 1.5, 2.0]), min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_permutation_relabels_classes(sizes, random):
    """Non-borderline inputs: permuting parts yields the same grouping."""
    parts = [exact_box(s, 1.0, 1.0) for s in sizes]
    perm = list(range(len(parts)))
    random.shuffle(perm)
    base = cluster_equivalent(parts)
    shuffled = cluster_equivalent([parts[i] for i in perm])
    groups = {frozenset(c) for c in base.classes}
    assert {frozenset(perm[i] for i in c) for c in shuffled.classes} == groups


# -- codes ------------------------------------------------------------------------------

def test_single_part_code():
    (code,) = instance_encode(EquivalencePartition(((0,),)), 1, 20)
    assert code.v_inter[0] == 1 and code.v_intra[0] == 1
    assert code.v_inter.sum() == 1 and code.v_intra.sum() == 1


def test_chair_legs_share_intra():
    p = EquivalencePartition(((0, 1, 2, 3), (4,), (5,)))
    codes = instance_encode(p, 6, 20)
    for leg in codes[:4]:
        assert np.array_equal(leg.v_intra, np.eye(20)[0])
    inter = np.stack([c.v_inter for c in codes[:4]])
    assert np.array_equal(inter, np.eye(20)[:4])


def test_identity_partition_codes():
    codes = instance_encode(EquivalencePartition(((0,), (1,), (2,))), 3, 20)
    for i, c in enumerate(codes):
        assert np.argmax(c.v_inter) == i and np.argmax(c.v_intra) == i


def test_zero_based_indices():
    # one-based would put the first part at index 1
    codes = instance_encode(EquivalencePartition(((1,), (0,))), 2, 4)
    assert np.array_equal(codes[0].v_inter, [1, 0, 0, 0])
    assert np.array_equal(codes[0].v_intra, [0, 1, 0, 0])


def test_too_many_parts_and_uncovered_part():
    with pytest.raises(ValueError, match="max_parts"):
        instance_encode(EquivalencePartition(((0, 1, 2),)), 3, 2)
    with pytest.raises(ValueError, match="not covered"):
        instance_encode(EquivalencePartition(((0,),)), 2, 4)


partitions = st.integers(1, 20).flatmap(
    lambda n: st.lists(st.integers(0, n - 1), min_size=n, max_size=n).map(
        lambda labels: EquivalencePartition(
            tuple(sorted((tuple(i for i in range(len(labels)) if labels[i] == k) for k in set(labels)), key=min))
        )
    )
)


@given(partitions)
def test_code_properties(p):
    n = p.n_parts
    m = code_matrix(p, n, 20)
    assert m.shape == (n, 40)
    inter, intra = m[:, :20], m[:, 20:]
    assert np.array_equal(inter @ inter.T, np.eye(n))
    cls = p.class_of()
    same = cls[:, None] == cls[None, :]
    assert np.array_equal((intra @ intra.T) == 1, same)
    assert np.array_equal(m, code_matrix(p, n, 20))

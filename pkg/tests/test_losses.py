import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from partassembly import autodiff as ad
from partassembly import losses
from partassembly.batch import collate
from partassembly.config import ModelConfig
from partassembly.encoding import EquivalencePartition
from partassembly.geometry import Pose, apply_pose, chamfer, random_quat
from partassembly.losses import (
    ChoiceTape,
    assembly_loss,
    chamfer_sum,
    choice_tape,
    hungarian,
    layered_loss,
    match_equivalent,
    mon_loss,
)
from partassembly.model import AssemblyNet


def brute_force(cost):
    m = cost.shape[0]
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(m)):  # lexicographic order
        total = sum(cost[i, perm[i]] for i in range(m))
        if total < best - 1e-12:
            best, best_perm = total, perm
    return np.array(best_perm), best


# -- Hungarian ---------------------------------------------------------------------

def test_hungarian_examples():
    assign, total = hungarian([[4.0, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert assign.tolist() == [1, 0, 2] and total == 5.0
    assert hungarian([[7.0]])[0].tolist() == [0]
    assert hungarian(np.zeros((0, 0)))[1] == 0.0


def test_hungarian_ties_are_lexicographic():
    assign, total = hungarian(np.ones((4, 4)))
    assert assign.tolist() == [0, 1, 2, 3] and total == 4.0
    cost = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert hungarian(cost)[0].tolist() == [0, 1]
    cost = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    assert hungarian(cost)[0].tolist() == [0, 1, 2]


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError, match="square"):
        hungarian(np.ones((2, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        hungarian([[np.nan, 1.0], [1.0, 1.0]])


@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.booleans())
def test_hungarian_matches_brute_force(m, seed, integer):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 4, (m, m)).astype(float) if integer else rng.uniform(0, 1, (m, m))
    assign, total = hungarian(cost)
    perm, best = brute_force(cost)
    assert abs(total - best) <= 1e-9
    assert sorted(assign.tolist()) == list(range(m))
    assert assign.tolist() == perm.tolist()


@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_hungarian_matches_scipy_total(m, seed):
    cost = np.random.default_rng(seed).normal(size=(m, m))
    r, c = linear_sum_assignment(cost)
    assert abs(hungarian(cost)[1] - cost[r, c].sum()) <= 1e-9


# -- chamfer on the tape -------------------------------------------------------------

@given(st.integers(0, 2**31 - 1), st.integers(1, 20), st.integers(1, 20))
def test_chamfer_sum_matches_numpy(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    got = chamfer_sum(torch.as_tensor(a)[None], torch.as_tensor(b)[None]).item()
    assert abs(got - chamfer(a, b)) <= 1e-12 * max(1.0, got)


def test_chamfer_kdtree_route_matches_dense(rng):
    a = torch.as_tensor(rng.normal(size=(2, 200, 3)))
    b = torch.as_tensor(rng.normal(size=(2, 150, 3)))
    assert 200 * 150 > losses.DENSE_LIMIT
    dense = losses.chamfer_sum_dense(a, b)
    assert torch.allclose(chamfer_sum(a, b), dense, rtol=1e-12, atol=0)


def test_chamfer_masks_ignore_padding(rng):
    a = torch.as_tensor(rng.normal(size=(1, 6, 3)))
    b = torch.as_tensor(rng.normal(size=(1, 5, 3)))
    am = torch.tensor([[True] * 4 + [False] * 2])
    bm = torch.tensor([[True] * 3 + [False] * 2])
    full = chamfer_sum(a[:, :4], b[:, :3])
    assert torch.allclose(chamfer_sum(a, b, am, bm), full, rtol=1e-12)


# -- assembly loss ---------------------------------------------------------------------

def square(n=16):
    t = (np.arange(n) + 0.5) / n - 0.5
    return np.stack([np.concatenate([t, t, np.full(n, -0.5), np.full(n, 0.5)]),
                     np.concatenate([np.full(n, -0.5), np.full(n, 0.5), t, t]),
                     np.zeros(4 * n)], axis=1)


def test_translation_only_error():
    pts = [np.random.default_rng(0).normal(size=(8, 3))]
    gt = [Pose.identity()]
    pred = [Pose(np.array([1.0, 0, 0, 0]), np.array([0.1, 0, 0]))]
    out = assembly_loss(pred, gt, pts)
    assert out.translation == pytest.approx(0.01)
    assert out.rotation == 0.0


def test_symmetric_part_has_no_rotation_loss():
    # a square outline turned by 90 degrees about its normal maps onto itself
    c = np.cos(np.pi / 4)
    pred = [Pose(np.array([c, 0, 0, c]), np.zeros(3))]
    out = assembly_loss(pred, [Pose.identity()], [square()])
    assert out.rotation < 1e-12 and out.translation == 0.0


def test_total_is_weighted_sum(rng):
    pts = [rng.normal(size=(10, 3)) for _ in range(3)]
    pred = [Pose(random_quat(rng), rng.uniform(-0.5, 0.5, 3)) for _ in range(3)]
    gt = [Pose(random_quat(rng), rng.uniform(-0.5, 0.5, 3)) for _ in range(3)]
    out = assembly_loss(pred, gt, pts, weights=(1.0, 10.0, 1.0))
    assert out.total == pytest.approx(out.translation + 10 * out.rotation + out.shape, rel=1e-12)
    placed_p = np.concatenate([apply_pose(p, x) for p, x in zip(pred, pts)])
    placed_g = np.concatenate([apply_pose(p, x) for p, x in zip(gt, pts)])
    assert out.shape == pytest.approx(chamfer(placed_p, placed_g), rel=1e-12)


def test_mean_chamfer_norm_divides_by_point_counts():
    from partassembly.config import TrainConfig

    lt, lr, ls = (torch.tensor([2.0, 3.0], dtype=torch.float64) for _ in range(3))
    mask = torch.tensor([[True, True, False], [True, True, True]])
    got = losses.weighted(lt, lr, ls, TrainConfig(chamfer_norm="mean"), mask, n_points=8)
    # L_r sums n-point part chamfers, L_s spans n * live points per side
    want = lt + 10 * lr / 8 + ls / torch.tensor([16.0, 24.0], dtype=torch.float64)
    torch.testing.assert_close(got, want, rtol=1e-15, atol=0)
    assert torch.equal(losses.weighted(lt, lr, ls, TrainConfig()), lt + 10 * lr + ls)
    with pytest.raises(ValueError, match="mask"):
        losses.weighted(lt, lr, ls, TrainConfig(chamfer_norm="mean"))
    with pytest.raises(ValueError, match="chamfer_norm"):
        TrainConfig(chamfer_norm="max")


def test_assembly_loss_length_mismatch():
    with pytest.raises(ValueError):
        assembly_loss([Pose.identity()], [], [np.zeros((2, 3))])


# -- matching ------------------------------------------------------------------------------

def test_swapped_legs_are_matched():
    leg = np.random.default_rng(3).normal(size=(12, 3)) * [0.05, 0.05, 0.4]
    gt = [Pose(np.array([1.0, 0, 0, 0]), np.array([x, 0, 0])) for x in (-0.5, 0.5)]
    pred = gt[::-1]
    m = match_equivalent(pred, gt, [leg, leg], EquivalencePartition(((0, 1),)))
    assert m.perm.tolist() == [1, 0]
    matched = [gt[j] for j in m.perm]
    assert assembly_loss(pred, matched, [leg, leg]).total < 1e-12
    assert assembly_loss(pred, gt, [leg, leg]).total > 0.1


def test_matching_respects_classes():
    leg = np.random.default_rng(3).normal(size=(12, 3))
    gt = [Pose(np.array([1.0, 0, 0, 0]), np.array([x, 0, 0])) for x in (-0.5, 0.5)]
    m = match_equivalent(gt[::-1], gt, [leg, leg], EquivalencePartition(((0,), (1,))))
    assert m.perm.tolist() == [0, 1]


def placed_cost(pred, gt, parts, perm):
    return sum(chamfer(apply_pose(pred[i], parts[i]), apply_pose(gt[j], parts[i])) for i, j in enumerate(perm))


@given(st.integers(0, 2**31 - 1))
def test_matching_never_increases_its_objective(seed):
    rng = np.random.default_rng(seed)
    leg = rng.normal(size=(10, 3)) * [0.1, 0.1, 0.5]
    parts = [leg] * 3 + [rng.normal(size=(10, 3))]
    part = EquivalencePartition(((0, 1, 2), (3,)))
    pred = [Pose(random_quat(rng), rng.uniform(-1, 1, 3)) for _ in range(4)]
    gt = [Pose(random_quat(rng), rng.uniform(-1, 1, 3)) for _ in range(4)]
    m = match_equivalent(pred, gt, parts, part)
    assert sorted(m.perm[:3].tolist()) == [0, 1, 2] and m.perm[3] == 3
    best = min(placed_cost(pred, gt, parts, list(p) + [3]) for p in itertools.permutations(range(3)))
    assert placed_cost(pred, gt, parts, m.perm) <= best + 1e-9
    assert placed_cost(pred, gt, parts, m.perm) <= placed_cost(pred, gt, parts, range(4)) + 1e-9


@given(st.integers(0, 2**31 - 1))
def test_matching_never_increases_total_loss_near_solution(seed):
    """Predictions are a shuffled ground truth plus small noise."""
    rng = np.random.default_rng(seed)
    leg = rng.normal(size=(10, 3)) * [0.05, 0.05, 0.3]
    parts = [leg] * 4
    gt = [Pose(np.array([1.0, 0, 0, 0]), np.array([x, y, 0.0])) for x in (-0.3, 0.3) for y in (-0.3, 0.3)]
    order = rng.permutation(4)
    pred = [Pose(gt[k].rotation, gt[k].translation + rng.normal(scale=0.02, size=3)) for k in order]
    m = match_equivalent(pred, gt, parts, EquivalencePartition(((0, 1, 2, 3),)))
    after = assembly_loss(pred, [gt[j] for j in m.perm], parts).total
    assert after <= assembly_loss(pred, gt, parts).total + 1e-9


def test_matching_invariant_to_gt_relabel(rng):
    leg = rng.normal(size=(10, 3)) * [0.1, 0.1, 0.5]
    parts = [leg] * 3
    part = EquivalencePartition(((0, 1, 2),))
    pred = [Pose(random_quat(rng), rng.uniform(-1, 1, 3)) for _ in range(3)]
    gt = [Pose(random_quat(rng), rng.uniform(-1, 1, 3)) for _ in range(3)]
    a = match_equivalent(pred, gt, parts, part)
    relabelled = [gt[2], gt[0], gt[1]]
    b = match_equivalent(pred, relabelled, parts, part)
    la = assembly_loss(pred, [gt[j] for j in a.perm], parts)
    lb = assembly_loss(pred, [relabelled[j] for j in b.perm], parts)
    assert la.total == pytest.approx(lb.total, rel=1e-12)


def test_match_equivalent_partition_mismatch():
    with pytest.raises(ValueError):
        match_equivalent([Pose.identity()] * 2, [Pose.identity()] * 2, [np.zeros((2, 3))] * 2, EquivalencePartition(((0,),)))


# -- layered loss and MoN ----------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig(d_model=32, n_heads=4, n_layers=2, noise_dim=4, max_parts=20, n_pc=16, head_hidden=32)
    return AssemblyNet(cfg, seed=0)


def test_layered_loss_zero_at_ground_truth(small, chairs16):
    b = collate(chairs16[:3], small.config)
    poses = b.gt[None].repeat(2, 1, 1, 1)
    total, (lt, lr, ls) = layered_loss(poses, b)
    assert torch.all(total.abs() < 1e-10)


def test_layered_loss_averages_layers(small, chairs16):
    b = collate(chairs16[:2], small.config)
    ident = small.identity_poses(2, b.mask.shape[1])
    # matching comes from the final layer, here the ground truth itself
    mixed, _ = layered_loss(torch.stack([ident, b.gt]), b)
    one = losses.weighted(*losses.loss_terms(ident, b.gt, b.points, b.mask))
    assert torch.allclose(mixed, one / 2, rtol=1e-12)


def test_mon_single_branch_is_plain_loss(small, chairs16):
    b = collate(chairs16[:2], small.config)
    mean, best, per = mon_loss(small, b, n=1, seed=0, epoch=0)
    assert best.tolist() == [0, 0] and per.shape == (1, 2)
    assert torch.allclose(mean, per.mean(), rtol=1e-12)


def test_mon_picks_minimum(small, chairs16):
    with torch.no_grad():
        small.head.l3.weight.normal_(0, 0.2, generator=torch.Generator().manual_seed(0))
    b = collate(chairs16[:3], small.config)
    mean, best, per = mon_loss(small, b, n=4, seed=1, epoch=2)
    assert torch.equal(best, per.argmin(0))
    assert torch.allclose(mean, per.min(0).values.mean(), rtol=1e-10)
    small.head.reset_output()


def test_mon_noise_free_branches_agree(chairs16):
    cfg = ModelConfig(d_model=32, n_heads=4, n_layers=2, noise_dim=0, max_parts=20, n_pc=16, head_hidden=32)
    _, _, per = mon_loss(AssemblyNet(cfg), chairs16[:2], n=3)
    assert torch.equal(per[0], per[1]) and torch.equal(per[1], per[2])


# -- choice tape -----------------------------------------------------------------------------

def test_choice_tape_replays_recorded_indices(rng):
    x = torch.as_tensor(rng.normal(size=(1, 5, 3)))
    y = torch.as_tensor(rng.normal(size=(1, 5, 3)))
    tape = ChoiceTape()
    with choice_tape(tape):
        ref = chamfer_sum(x, y)
    assert tape.log
    tape.rewind()
    with choice_tape(tape):
        # a large shift would change the nearest neighbours; replay keeps the old ones
        shifted = chamfer_sum(x + 0.3, y)
    fresh = chamfer_sum(x + 0.3, y)
    assert not torch.equal(shifted, fresh) or torch.equal(ref, fresh)
    with choice_tape(tape), pytest.raises(RuntimeError, match="past"):
        chamfer_sum(x, y)


def test_choice_tape_inactive_by_default(rng):
    x = torch.as_tensor(rng.normal(size=(1, 4, 3)))
    assert ad._TAPE is None
    assert torch.equal(chamfer_sum(x, x), torch.zeros(1, dtype=torch.float64))

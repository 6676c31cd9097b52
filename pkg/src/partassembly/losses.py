"""Hungarian relabelling inside equivalence classes and the assembly loss stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .autodiff import ChoiceTape, _choose, choice_tape
from .batch import Batch, batch_noise, collate
from .config import ModelConfig, TrainConfig
from .geometry import Pose

LAMBDA_T, LAMBDA_R, LAMBDA_S = 1.0, 10.0, 1.0
# upper bound on distance-matrix entries per chunk, keeps memory flat
CHUNK_ENTRIES = 8_000_000
DENSE_LIMIT = 128 * 128


# -- Hungarian ------------------------------------------------------------------

def _solve(cost: np.ndarray):
    """Shortest augmenting path assignment; returns (row->col, u, v)."""
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # column j -> row (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    assign[p[1:] - 1] = np.arange(n)
    return assign, u[1:], v[1:]


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect assignment of a square matrix.

    Among optimal assignments the lexicographically smallest ``row -> col``
    vector is returned. The total is summed in row order.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    m = cost.shape[0]
    if m == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    assign, u, v = _solve(cost)
    best = _total(cost, assign)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= tol
    if tight.sum(axis=1).max() > 1:
        assign = _lex_smallest(cost, tight, best, tol)
    return assign, _total(cost, assign)


def _total(cost, assign) -> float:
    total = 0.0
    for i, j in enumerate(assign):
        total += cost[i, j]
    return float(total)


def _lex_smallest(cost, tight, best, tol) -> np.ndarray:
    m = cost.shape[0]
    rows, cols = list(range(m)), list(range(m))
    fixed_cost = 0.0
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        rows.remove(i)
        for j in sorted(c for c in cols if tight[i, c]):
            rest = [c for c in cols if c != j]
            sub = cost[np.ix_(rows, rest)] if rows else np.zeros((0, 0))
            sub_cost = _total(sub, _solve(sub)[0]) if rows else 0.0
            if fixed_cost + cost[i, j] + sub_cost <= best + tol:
                out[i] = j
                fixed_cost += cost[i, j]
                cols.remove(j)
                break
        else:  # pragma: no cover - tight set always contains a feasible column
            raise RuntimeError("lexicographic tie-break failed")
    return out


# -- batched geometry -----------------------------------------------------------

def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def rotate(poses: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """``(..., 7)`` poses applied rotation-only to ``(..., n, 3)`` points."""
    return points @ quat_to_matrix(poses[..., :4]).transpose(-1, -2)


def transform(poses: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return rotate(poses, points) + poses[..., None, 4:7]


def _sq_dists(x, y):
    d = (x * x).sum(-1)[..., :, None] + (y * y).sum(-1)[..., None, :] - 2 * x @ y.transpose(-1, -2)
    return d.clamp_min(0.0)


def chamfer_sum_dense(x, y, xmask=None, ymask=None) -> torch.Tensor:
    """Reference batched chamfer sum built on dense min reductions."""
    d = _sq_dists(x, y)
    if ymask is not None:
        d = d.masked_fill(~ymask[..., None, :], float("inf"))
    fwd = d.min(dim=-1).values
    if xmask is not None:
        fwd = torch.where(xmask, fwd, torch.zeros_like(fwd))
        d = d.masked_fill(~xmask[..., :, None], float("inf"))
    bwd = d.min(dim=-2).values
    if ymask is not None:
        bwd = torch.where(ymask, bwd, torch.zeros_like(bwd))
    return fwd.sum(-1) + bwd.sum(-1)


def nn_indices(x, y, xmask=None, ymask=None):
    """Nearest live neighbours in both directions, computed without gradient.

    Returns ``(x -> y, y -> x)`` index tensors of shapes ``(X, M)`` and ``(X, K)``.
    Small sets use a dense argmin (lowest index on ties), large sets a KD-tree.
    """
    return _choose(lambda: _nn_indices(x, y, xmask, ymask))


def _nn_indices(x, y, xmask, ymask):
    X, M, _ = x.shape
    K = y.shape[1]
    with torch.no_grad():
        if M * K <= DENSE_LIMIT:
            per = max(1, CHUNK_ENTRIES // (M * K))
            fwd, bwd = [], []
            for s in range(0, X, per):
                d = _sq_dists(x[s : s + per], y[s : s + per])
                if ymask is not None:
                    d = d.masked_fill(~ymask[s : s + per, None, :], float("inf"))
                fwd.append(d.argmin(dim=-1))
                if xmask is not None:
                    d = d.masked_fill(~xmask[s : s + per, :, None], float("inf"))
                bwd.append(d.argmin(dim=-2))
            return torch.cat(fwd), torch.cat(bwd)
        xs = x.detach().to(torch.float64).numpy()
        ys = y.detach().to(torch.float64).numpy()
        fwd = np.empty((X, M), dtype=np.int64)
        bwd = np.empty((X, K), dtype=np.int64)
        for k in range(X):
            xl = np.arange(M) if xmask is None else np.flatnonzero(xmask[k].numpy())
            yl = np.arange(K) if ymask is None else np.flatnonzero(ymask[k].numpy())
            fwd[k] = yl[cKDTree(ys[k, yl]).query(xs[k], k=1)[1]]
            bwd[k] = xl[cKDTree(xs[k, xl]).query(ys[k], k=1)[1]]
        return torch.from_numpy(fwd), torch.from_numpy(bwd)


def _gathered(x, y, idx):
    near = torch.gather(y, 1, idx[..., None].expand(-1, -1, 3))
    return ((x - near) ** 2).sum(-1)


def chamfer_sum(x, y, xmask=None, ymask=None) -> torch.Tensor:
    """Batched symmetric sum of squared NN distances over ``(..., M, 3)`` and ``(..., K, 3)``.

    Neighbours are found without gradient; the distances to them are then
    recomputed on the tape, so the gradient is the usual chamfer subgradient.
    Masked points neither act as neighbours nor contribute terms.
    """
    lead = x.shape[:-2]
    x2, y2 = x.reshape(-1, *x.shape[-2:]), y.reshape(-1, *y.shape[-2:])
    xm = None if xmask is None else xmask.reshape(-1, xmask.shape[-1])
    ym = None if ymask is None else ymask.reshape(-1, ymask.shape[-1])
    ixy, iyx = nn_indices(x2, y2, xm, ym)
    fwd = _gathered(x2, y2, ixy)
    bwd = _gathered(y2, x2, iyx)
    if xm is not None:
        fwd = torch.where(xm, fwd, torch.zeros_like(fwd))
    if ym is not None:
        bwd = torch.where(ym, bwd, torch.zeros_like(bwd))
    return (fwd.sum(-1) + bwd.sum(-1)).reshape(lead)


# -- matching -------------------------------------------------------------------

@dataclass(frozen=True)
class Matching:
    """``perm[i]`` is the ground-truth part assigned to predicted part ``i``."""

    perm: np.ndarray


def match_indices(pred, gt, points, classes) -> torch.Tensor:
    """Within-class Hungarian relabelling for a batch; returns ``(X, P)`` gt indices.

    Cost of pairing prediction ``i`` with ground truth ``j`` is the chamfer
    sum between part ``i`` under the predicted pose and part ``j`` under its
    ground-truth pose. No gradient flows through the assignment.
    """
    return _choose(lambda: _match_indices(pred, gt, points, classes))


def _match_indices(pred, gt, points, classes):
    X, P = pred.shape[:2]
    perm = torch.arange(P).repeat(X, 1)
    triples = [(x, c) for x, cls in enumerate(classes) for c in cls if len(c) > 1]
    if not triples:
        return perm
    bi, ii, jj = [], [], []
    for x, c in triples:
        for i in c:
            for j in c:
                bi.append(x)
                ii.append(i)
                jj.append(j)
    bi, ii, jj = torch.tensor(bi), torch.tensor(ii), torch.tensor(jj)
    with torch.no_grad():
        a = transform(pred[bi, ii], points[bi, ii])
        b = transform(gt[bi, jj], points[bi, jj])
        costs = chamfer_sum(a, b).numpy()
    pos = 0
    for x, c in triples:
        m = len(c)
        assign, _ = hungarian(costs[pos : pos + m * m].reshape(m, m))
        pos += m * m
        for r, col in enumerate(assign):
            perm[x, c[r]] = c[col]
    return perm


def apply_matching(gt: torch.Tensor, perm: torch.Tensor) -> torch.Tensor:
    return torch.gather(gt, 1, perm[..., None].expand(-1, -1, gt.shape[-1]))


def match_equivalent(pred_poses, gt_poses, parts, partition) -> Matching:
    """Single-sample matching on lists of :class:`Pose`."""
    if not len(pred_poses) == len(gt_poses) == len(parts) == partition.n_parts:
        raise ValueError("pred, gt, parts and partition disagree on the part count")
    pred = torch.as_tensor(np.stack([p.to_vector() for p in pred_poses]))[None]
    gt = torch.as_tensor(np.stack([p.to_vector() for p in gt_poses]))[None]
    pts = torch.as_tensor(np.stack(parts), dtype=torch.float64)[None]
    perm = match_indices(pred, gt, pts, [partition.classes])
    return Matching(perm[0].numpy())


# -- loss terms -----------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    translation: float
    rotation: float
    shape: float
    total: float
    weights: tuple = (LAMBDA_T, LAMBDA_R, LAMBDA_S)


def loss_terms(pred, gt, points, mask):
    """Per-sample ``(L_t, L_r, L_s)`` for ``(X, P, 7)`` poses and ``(X, P, n, 3)`` parts."""
    m = mask.to(pred.dtype)
    lt = (((pred[..., 4:] - gt[..., 4:]) ** 2).sum(-1) * m).sum(-1)
    lr_part = chamfer_sum(rotate(pred, points), rotate(gt, points))
    lr = (lr_part * m).sum(-1)
    X, P, n, _ = points.shape
    pmask = mask[..., None].expand(X, P, n).reshape(X, P * n)
    ls = chamfer_sum(
        transform(pred, points).reshape(X, P * n, 3),
        transform(gt, points).reshape(X, P * n, 3),
        pmask,
        pmask,
    )
    return lt, lr, ls


def weighted(lt, lr, ls, cfg: TrainConfig | None = None, mask=None, n_points: int | None = None):
    """Training objective from the sum-form terms.

    With ``cfg.chamfer_norm == "mean"`` the chamfer terms are divided by the
    point count per side first (``mask`` and ``n_points`` are then required),
    putting them on the per-part scale of the translation term.
    """
    wt, wr, ws = (LAMBDA_T, LAMBDA_R, LAMBDA_S) if cfg is None else (cfg.lambda_t, cfg.lambda_r, cfg.lambda_s)
    if cfg is not None and cfg.chamfer_norm == "mean":
        if mask is None or n_points is None:
            raise ValueError("mean chamfer normalisation needs the part mask and point count")
        lr = lr / n_points
        ls = ls / (n_points * mask.sum(-1).to(ls.dtype))
    return wt * lt + wr * lr + ws * ls


def assembly_loss(pred_poses, gt_poses, parts, weights=(LAMBDA_T, LAMBDA_R, LAMBDA_S)) -> LossBreakdown:
    """Loss of one already-matched prediction given as lists of :class:`Pose`."""
    if not len(pred_poses) == len(gt_poses) == len(parts):
        raise ValueError("pred, gt and parts must have equal length")
    pred = torch.as_tensor(np.stack([p.to_vector() for p in pred_poses]))[None]
    gt = torch.as_tensor(np.stack([p.to_vector() for p in gt_poses]))[None]
    pts = torch.as_tensor(np.stack(parts), dtype=torch.float64)[None]
    lt, lr, ls = (float(t[0]) for t in loss_terms(pred, gt, pts, torch.ones(1, len(parts), dtype=torch.bool)))
    wt, wr, ws = weights
    return LossBreakdown(lt, lr, ls, wt * lt + wr * lr + ws * ls, tuple(weights))


def layered_loss(poses, batch: Batch, cfg: TrainConfig | None = None, mask=None, points=None, gt=None, classes=None):
    """Matched loss per sample averaged over refinement layers.

    ``poses`` is ``(L, X, P, 7)``. The relabelling is computed once from the
    final layer and shared by every layer of the same forward pass.
    Returns ``(total (X,), (lt, lr, ls) each (X,))`` with terms layer-averaged.
    """
    mask = batch.mask if mask is None else mask
    points = batch.points if points is None else points
    gt = batch.gt if gt is None else gt
    classes = batch.classes if classes is None else classes
    L, X, P = poses.shape[:3]
    flat = poses.reshape(L * X, P, 7)
    rep = lambda t: t.repeat(L, *([1] * (t.dim() - 1)))  # noqa: E731
    perm = match_indices(poses[-1].detach(), gt, points, classes)
    matched = rep(apply_matching(gt, perm))
    lt, lr, ls = (t.reshape(L, X).mean(0) for t in loss_terms(flat, matched, rep(points), rep(mask)))
    return weighted(lt, lr, ls, cfg, mask, points.shape[2]), (lt, lr, ls)


# -- min-of-N --------------------------------------------------------------------

def mon_select(model, batch: Batch, features, n: int, seed: int, epoch: int, cfg: TrainConfig | None = None):
    """Evaluate ``n`` noise branches without gradients; return per-sample best branch and losses ``(n, B)``."""
    return _choose(lambda: _mon_select(model, batch, features, n, seed, epoch, cfg))


def _mon_select(model, batch, features, n, seed, epoch, cfg):
    B = batch.size
    noise = batch_noise(batch, model.config.noise_dim, seed, epoch, range(n))
    with torch.no_grad():
        _, poses = model.encode(
            features.repeat(n, 1, 1), batch.codes.repeat(n, 1, 1), batch.mask.repeat(n, 1), noise
        )
        big = batch.repeat(n)
        total, _ = layered_loss(poses, big, cfg)
    losses = total.reshape(n, B)
    return torch.argmin(losses, dim=0), losses


def mon_loss(model, samples, n: int = 5, seed: int = 0, epoch: int = 0, cfg: TrainConfig | None = None):
    """Min-of-N matched loss with gradient through the winning branch only.

    Returns ``(mean loss tensor, best branch per sample, per-branch losses (n, B))``.
    """
    batch = samples if isinstance(samples, Batch) else collate(samples, model.config)
    features = model.features(batch.points)
    best, losses = mon_select(model, batch, features.detach(), n, seed, epoch, cfg)
    noise_all = batch_noise(batch, model.config.noise_dim, seed, epoch, range(n))
    B = batch.size
    noise = noise_all.reshape(n, B, *noise_all.shape[1:])[best, torch.arange(B)]
    _, poses = model.encode(features, batch.codes, batch.mask, noise)
    total, _ = layered_loss(poses, batch, cfg)
    return total.mean(), best, losses


def poses_to_tensor(poses: list[Pose]) -> torch.Tensor:
    return torch.as_tensor(np.stack([p.to_vector() for p in poses]))

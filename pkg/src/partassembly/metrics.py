"""Shape chamfer distance, part accuracy, connectivity accuracy and friends."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .batch import Batch, batch_noise, collate
from .geometry import Pose
from .losses import apply_matching, chamfer_sum, loss_terms, match_indices, transform, weighted
from .synthetic import CONTACT_TAU, AssemblySample, ContactPair, find_contacts

TAU_P = 0.01
TAU_C = 0.01
EVAL_EPOCH = 1_000_000


@dataclass
class MetricReport:
    scd: float
    pa: float
    ca: float | None
    per_shape: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {"scd": self.scd, "pa": self.pa, "ca": self.ca, "shapes": len(self.per_shape) or 1}

    def records(self) -> str:
        """Line-delimited JSON: one line per shape, then the aggregate."""
        lines = [json.dumps(r, sort_keys=True) for r in self.per_shape]
        lines.append(json.dumps({"aggregate": self.to_record()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        ca = "n/a" if self.ca is None else f"{self.ca:.2f}"
        rows = [("shapes", str(len(self.per_shape) or 1)), ("SCD", f"{self.scd:.6f}"), ("PA (%)", f"{self.pa:.2f}"), ("CA (%)", ca)]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def aggregate(reports) -> MetricReport:
    """Mean over shapes; shapes with undefined CA are left out of the CA mean."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    cas = [r.ca for r in reports if r.ca is not None]
    per = []
    for r in reports:
        per.extend(r.per_shape or [r.to_record()])
    return MetricReport(
        float(np.mean([r.scd for r in reports])),
        float(np.mean([r.pa for r in reports])),
        float(np.mean(cas)) if cas else None,
        per,
    )


# -- metric primitives ------------------------------------------------------------

def _vec(poses) -> torch.Tensor:
    if isinstance(poses, torch.Tensor):
        return poses.to(torch.float64)
    return torch.as_tensor(np.stack([p.to_vector() if isinstance(p, Pose) else np.asarray(p) for p in poses]), dtype=torch.float64)


def _pts(parts) -> torch.Tensor:
    return torch.as_tensor(np.stack(parts), dtype=torch.float64)


def contact_pairs(sample: AssemblySample, tau: float = CONTACT_TAU) -> list[ContactPair]:
    """Contact points from the construction record, or by proximity when there is none."""
    return find_contacts(sample.parts, sample.gt_poses, sample.adjacency or None, tau)


def part_cd(pred_poses, gt_poses, parts) -> np.ndarray:
    """Per-part chamfer in world space, averaged over the point count."""
    pts = _pts(parts)
    a, b = transform(_vec(pred_poses), pts), transform(_vec(gt_poses), pts)
    with torch.no_grad():
        return (chamfer_sum(a, b) / pts.shape[1]).numpy()


def part_accuracy(pred_poses, matched_gt_poses, parts, tau_p: float = TAU_P) -> float:
    cd = part_cd(pred_poses, matched_gt_poses, parts)
    return float(100.0 * np.mean(cd < tau_p))


def contact_gaps(pred_poses, contacts) -> np.ndarray:
    pred = [p if isinstance(p, Pose) else Pose.from_vector(p) for p in pred_poses]
    gaps = []
    for c in contacts:
        a = pred[c.i].matrix @ np.asarray(c.c_ij, dtype=np.float64) + pred[c.i].translation
        b = pred[c.j].matrix @ np.asarray(c.c_ji, dtype=np.float64) + pred[c.j].translation
        gaps.append(float(np.sum((a - b) ** 2)))
    return np.asarray(gaps)


def connectivity_accuracy(pred_poses, contacts, tau_c: float = TAU_C) -> float | None:
    """Percentage of contact pairs closer than ``tau_c`` (squared); ``None`` without contacts."""
    if not contacts:
        return None
    return float(100.0 * np.mean(contact_gaps(pred_poses, contacts) < tau_c))


def shape_cd(pred_poses, gt_poses, parts) -> float:
    pts = _pts(parts)
    n = pts.shape[0] * pts.shape[1]
    a = transform(_vec(pred_poses), pts).reshape(1, n, 3)
    b = transform(_vec(gt_poses), pts).reshape(1, n, 3)
    with torch.no_grad():
        return float(chamfer_sum(a, b)[0])


def evaluate_prediction(sample: AssemblySample, pred_poses, tau_p=TAU_P, tau_c=TAU_C) -> MetricReport:
    """Match within classes, then SCD / PA / CA for one predicted assembly."""
    pred = _vec(pred_poses)
    gt = _vec(sample.gt_poses)
    pts = _pts(sample.parts)
    perm = match_indices(pred[None], gt[None], pts[None], [sample.partition.classes])[0]
    matched = gt[perm]
    # prediction for each ground-truth slot, so contact points keep their labels
    relabelled = torch.empty_like(pred)
    relabelled[perm] = pred
    scd = shape_cd(pred, gt, sample.parts)
    pa = part_accuracy(pred, matched, sample.parts, tau_p)
    ca = connectivity_accuracy(relabelled.numpy(), sample.contacts, tau_c)
    rec = {"id": sample.id, "scd": scd, "pa": pa, "ca": ca}
    return MetricReport(scd, pa, ca, [rec])


# -- model-driven evaluation -------------------------------------------------------

def predict_branches(model, samples, k: int, seed: int = 0, epoch: int = EVAL_EPOCH, batch: Batch | None = None):
    """Final-layer poses for ``k`` noise branches: ``(k, B, P, 7)``, plus the batch."""
    batch = batch or collate(samples, model.config)
    B = batch.size
    with torch.no_grad():
        feats = model.features(batch.points)
        noise = batch_noise(batch, model.config.noise_dim, seed, epoch, range(k))
        _, poses = model.encode(feats.repeat(k, 1, 1), batch.codes.repeat(k, 1, 1), batch.mask.repeat(k, 1), noise)
    return poses[-1].reshape(k, B, *poses.shape[2:]).to(torch.float64), batch


def branch_scd(branches, batch: Batch) -> torch.Tensor:
    """Shape chamfer per branch and sample, ``(k, B)``."""
    k, B, P, _ = branches.shape
    pts = batch.points.to(torch.float64)
    n = pts.shape[2]
    pmask = batch.mask[..., None].expand(B, P, n).reshape(B, P * n).repeat(k, 1)
    a = transform(branches, pts.repeat(k, 1, 1, 1).reshape(k, B, P, n, 3)).reshape(k * B, P * n, 3)
    b = transform(batch.gt.to(torch.float64), pts).reshape(B, P * n, 3).repeat(k, 1, 1)
    with torch.no_grad():
        return chamfer_sum(a, b, pmask, pmask).reshape(k, B)


def mmd_select(model, sample_or_samples, k: int = 10, seed: int = 0):
    """Pick, per shape, the branch with the lowest shape chamfer among ``k``.

    Returns ``(predictions, report)``; predictions is a list of ``(P, 7)`` arrays.
    """
    single = isinstance(sample_or_samples, AssemblySample)
    samples = [sample_or_samples] if single else list(sample_or_samples)
    if k < 1:
        raise ValueError("k must be >= 1")
    branches, batch = predict_branches(model, samples, k, seed)
    best = torch.argmin(branch_scd(branches, batch), dim=0)
    preds, reports = [], []
    for b, s in enumerate(samples):
        pose = branches[best[b], b, : s.n_parts].numpy()
        preds.append(pose)
        reports.append(evaluate_prediction(s, pose))
    report = reports[0] if single else aggregate(reports)
    return (preds[0] if single else preds), report


def matched_total_losses(model, sample: AssemblySample, E: int, seed: int = 0, cfg=None) -> np.ndarray:
    """Final-layer matched total loss for ``E`` noise branches of one sample."""
    branches, batch = predict_branches(model, [sample], E, seed)
    flat = branches[:, 0]
    gt = batch.gt.to(torch.float64).repeat(E, 1, 1)
    pts = batch.points.to(torch.float64).repeat(E, 1, 1, 1)
    mask = batch.mask.repeat(E, 1)
    with torch.no_grad():
        perm = match_indices(flat, gt, pts, batch.classes * E)
        lt, lr, ls = loss_terms(flat, apply_matching(gt, perm), pts, mask)
        return weighted(lt, lr, ls, cfg, mask, pts.shape[2]).numpy()


def variability(model, sample: AssemblySample, E: int = 10, seed: int = 0) -> float:
    """Gap between worst and best matched loss over ``E`` noise draws."""
    if E < 1:
        raise ValueError("E must be >= 1")
    losses = matched_total_losses(model, sample, E, seed)
    return float(losses.max() - losses.min())


# -- in-process evaluation ----------------------------------------------------------

def inprocess_predict(model, batch: Batch, query, noise) -> torch.Tensor:
    """Decoder poses ``(L, B, 7)`` for one query slot per sample; all other live slots are memory at GT.

    The memory parts enter as the assembled in-process shape: their clouds are
    placed at ground truth before feature extraction and their pose tokens are
    clamped to it. The query keeps its canonical cloud.
    """
    B, P = batch.mask.shape
    query = torch.as_tensor(query, dtype=torch.long)
    rows = torch.arange(B)
    is_query = torch.zeros(B, P, dtype=torch.bool)
    is_query[rows, query] = True
    mmask = batch.mask & ~is_query
    placed = model.features(transform(batch.gt.to(batch.points.dtype), batch.points))
    memory, _ = model.encode(placed, batch.codes, mmask, noise, known_poses=batch.gt, known=mmask)
    qfeat = model.features(batch.points[rows, query][:, None])
    poses = model.decode(
        qfeat, batch.codes[rows, query][:, None], torch.ones(B, 1, dtype=torch.bool),
        noise[rows, query][:, None], memory, mmask,
    )
    return poses[:, :, 0]


def inprocess_part_report(sample: AssemblySample, i: int, pose_i, tau_p=TAU_P, tau_c=TAU_C) -> MetricReport:
    """Metrics of the shape with part ``i`` at ``pose_i`` and every other part at ground truth."""
    poses = [p.to_vector() for p in sample.gt_poses]
    poses[i] = np.asarray(pose_i, dtype=np.float64)
    scd = shape_cd(poses, sample.gt_poses, sample.parts)
    pa = part_accuracy([poses[i]], [sample.gt_poses[i]], [sample.parts[i]], tau_p)
    mine = [c for c in sample.contacts if i in (c.i, c.j)]
    ca = connectivity_accuracy(poses, mine, tau_c)
    return MetricReport(scd, pa, ca, [{"id": sample.id, "part": i, "scd": scd, "pa": pa, "ca": ca}])


def inprocess_eval(model, sample: AssemblySample, seed: int = 0, decoder=None) -> MetricReport:
    """Remove each part in turn, predict it from the rest, average the per-part reports.

    ``decoder(sample, i)`` may replace the model to supply part ``i``'s pose.
    """
    if sample.n_parts < 2:
        raise ValueError("in-process evaluation needs at least two parts")
    N = sample.n_parts
    if decoder is not None:
        poses = [np.asarray(decoder(sample, i)) for i in range(N)]
    else:
        batch = collate([sample] * N, model.config)
        noise = batch_noise(collate([sample], model.config), model.config.noise_dim, seed, EVAL_EPOCH, [0]).repeat(N, 1, 1)
        with torch.no_grad():
            poses = inprocess_predict(model, batch, list(range(N)), noise)[-1].to(torch.float64).numpy()
    reports = [inprocess_part_report(sample, i, poses[i]) for i in range(N)]
    out = aggregate(reports)
    return MetricReport(out.scd, out.pa, out.ca, [{"id": sample.id, "scd": out.scd, "pa": out.pa, "ca": out.ca}])

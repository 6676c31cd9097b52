"""Finite-difference checks of every tape op and of the full training loss.

Op checks compare every input coordinate. Model checks are per parameter
tensor: a directional derivative along a random unit direction plus a few
sampled coordinates, which covers every tensor at a cost that fits on one core.

The training loss is only piecewise smooth (nearest neighbours, assignments
and the best noise branch switch discretely), so by default the probes replay
the discrete choices of the reference pass and both routes differentiate the
same smooth piece. ``frozen=False`` probes the raw loss instead.
"""

from __future__ import annotations

import contextlib
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import autodiff as ad
from .batch import batch_noise, collate
from .config import load_config
from .losses import ChoiceTape, choice_tape, mon_loss
from .model import AssemblyNet
from .synthetic import GeneratorSpec, generate_one, subset

EPS = 1e-4


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst_name(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""

    def lines(self) -> list[str]:
        return [f"{name:<48} {err:.3e}" for name, err in sorted(self.errors.items())]


def _op_cases(rng: np.random.Generator):
    """``(name, f, x)`` triples; each ``f`` maps one float64 tensor to a scalar."""

    def r(*shape):
        return torch.as_tensor(rng.standard_normal(shape))

    def proj(y, w):
        return (y * w).sum()

    W, v, b, lw, lb = r(4, 3), r(2, 3), r(3), r(4), r(4)
    w23, w24, w26, w3, w32 = r(2, 3), r(2, 4), r(2, 6), r(3), r(3, 2)
    mask = torch.zeros(2, 4)
    mask[1, 2:] = float("-inf")
    idx = torch.tensor([2, 0, 2])
    return [
        ("matmul", lambda x: proj(ad.op_apply("matmul", [x, W]), w23), r(2, 4)),
        ("add", lambda x: proj(ad.op_apply("add", [x, b]), w23), r(2, 3)),
        ("mul", lambda x: proj(ad.op_apply("mul", [x, v]), w23), r(2, 3)),
        ("concat", lambda x: proj(ad.op_apply("concat", [x, v], axis=-1), w26), r(2, 3)),
        ("relu", lambda x: proj(ad.op_apply("relu", [x]), w23), r(2, 3)),
        ("tanh", lambda x: proj(ad.op_apply("tanh", [x]), w23), r(2, 3)),
        ("softmax", lambda x: proj(ad.op_apply("softmax", [x], mask=mask), w24), r(2, 4)),
        ("layer_norm", lambda x: proj(ad.op_apply("layer_norm", [x, lw, lb]), w24), r(2, 4)),
        ("reduce_max", lambda x: proj(ad.op_apply("reduce_max", [x], axis=0), w3), r(5, 3)),
        ("reduce_mean", lambda x: proj(ad.op_apply("reduce_mean", [x], axis=0), w3), r(5, 3)),
        ("l2_normalize", lambda x: proj(ad.op_apply("l2_normalize", [x]), w23), r(2, 3)),
        ("gather", lambda x: proj(ad.op_apply("gather", [x], index=idx, axis=0), w32), r(5, 2)),
        ("slice", lambda x: proj(ad.op_apply("slice", [x], start=1, stop=4), w23), r(2, 5)),
    ]


def check_ops(seed: int = 0, eps: float = EPS) -> dict:
    rng = np.random.default_rng(seed)
    return {f"op/{name}": ad.grad_check(f, x, eps) for name, f, x in _op_cases(rng)}


def tiny_setup(seed: int = 0):
    """Tiny float64 model with a perturbed pose head and one two-part sample."""
    model_cfg, train_cfg, _ = load_config(preset="tiny", overrides={"model": {"dtype": "float64"}})
    sample = generate_one(GeneratorSpec(category="chair", n_pc=model_cfg.n_pc, seed=seed, dense=256), 0)
    legs = next(c for c in sample.partition.classes if len(c) >= 2)
    two = subset(sample, legs[:2])
    model = AssemblyNet(model_cfg, seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        # the zero-initialised output layer would hide every upstream gradient
        for head in (model.head, model.dec_head):
            head.l3.weight.copy_(0.05 * torch.randn(head.l3.weight.shape, generator=gen, dtype=torch.float64))
    return model, dataclasses.replace(train_cfg, n_mon=2), two


def _replaying(loss_fn, tape: ChoiceTape):
    def probe():
        tape.rewind()
        with choice_tape(tape):
            return loss_fn()

    return probe


def _param_checks(loss_fn, params: dict, rng, eps: float, coords: int, frozen: bool = True) -> dict:
    names = list(params)
    tensors = [params[n] for n in names]
    tape = ChoiceTape()
    with choice_tape(tape) if frozen else contextlib.nullcontext():
        grads = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    probe = _replaying(loss_fn, tape) if frozen else loss_fn
    errors = {}
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            g = torch.zeros_like(p) if g is None else g
            d = torch.as_tensor(rng.standard_normal(p.shape), dtype=p.dtype)
            d /= d.norm()
            base = p.detach().clone()
            p.copy_(base + eps * d)
            hi = float(probe())
            p.copy_(base - eps * d)
            lo = float(probe())
            p.copy_(base)
            errors[f"{name}/dir"] = ad.relative_error(float((g * d).sum()), (hi - lo) / (2 * eps))
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in rng.choice(flat.numel(), size=min(coords, flat.numel()), replace=False):
                orig = float(flat[i])
                flat[i] = orig + eps
                hi = float(probe())
                flat[i] = orig - eps
                lo = float(probe())
                flat[i] = orig
                errors.setdefault(f"{name}/coord", 0.0)
                errors[f"{name}/coord"] = max(errors[f"{name}/coord"], ad.relative_error(float(gflat[i]), (hi - lo) / (2 * eps)))
    return errors


def check_model(seed: int = 0, eps: float = EPS, coords: int = 2, frozen: bool = True) -> dict:
    """Gradient of the min-of-N layered loss, and of the decoder loss, w.r.t. every parameter."""
    from .training import decoder_losses

    model, cfg, sample = tiny_setup(seed)
    rng = np.random.default_rng(seed)
    enc = model.encoder_parameters()
    errors = {f"encoder/{k}": v for k, v in _param_checks(lambda: mon_loss(model, [sample], cfg.n_mon, seed, 0, cfg)[0], enc, rng, eps, coords, frozen).items()}

    batch = collate([sample], model.config)
    noise = batch_noise(batch, model.config.noise_dim, seed, 0, [0])
    dec = model.decoder_parameters()
    for p in enc.values():
        p.requires_grad_(False)
    try:
        dec_err = _param_checks(lambda: decoder_losses(model, batch, [1], noise, cfg).sum(), dec, rng, eps, coords, frozen)
    finally:
        for p in enc.values():
            p.requires_grad_(True)
    errors.update({f"decoder/{k}": v for k, v in dec_err.items()})
    return errors


def run(seed: int = 0, eps: float = EPS, frozen: bool = True) -> GradReport:
    t0 = time.perf_counter()
    errors = check_ops(seed, eps)
    errors.update(check_model(seed, eps, frozen=frozen))
    return GradReport(errors, time.perf_counter() - t0)


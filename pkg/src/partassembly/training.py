"""Optimisation loop, evaluation runs and in-process decoder fine-tuning."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .autodiff import NonFiniteError
from .batch import Batch, batch_noise, collate, sample_key
from .config import ModelConfig, TrainConfig, dump_config
from .losses import loss_terms, mon_loss, weighted
from .metrics import aggregate, inprocess_eval, inprocess_predict, mmd_select
from .synthetic import subset, survivors

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


# -- optimiser ----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> AdamState:
    """One AdamW update in place: decoupled decay, then bias-corrected Adam."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    lr, wd = config.lr, config.weight_decay
    c1, c2 = 1 - BETA1**t, 1 - BETA2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            p.mul_(1 - lr * wd)
            m.mul_(BETA1).add_(g, alpha=1 - BETA1)
            v.mul_(BETA2).addcmul_(g, g, value=1 - BETA2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS))
    return state


# -- run bookkeeping -------------------------------------------------------------------

@dataclass
class RunRecord:
    seed: int
    epochs: list = field(default_factory=list)
    best_pa: float = -1.0
    best_epoch: int = -1
    best_checkpoint: bytes | None = None

    def append(self, entry: dict, sink=None):
        self.epochs.append(entry)
        if sink is not None:
            sink.write(json.dumps(entry, sort_keys=True) + "\n")
            sink.flush()

    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def _check_compatible(samples, config: ModelConfig):
    if not samples:
        raise ValueError("training split is empty")
    for s in samples:
        if s.n_parts > config.max_parts:
            raise ValueError(f"sample {s.id} has {s.n_parts} parts; model max_parts={config.max_parts}")
        if s.parts[0].shape[0] != config.n_pc:
            raise ValueError(f"sample {s.id} has {s.parts[0].shape[0]} points per part; model n_pc={config.n_pc}")


def _batches(samples, size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch, 17]).permutation(len(samples))
    for s in range(0, len(order), size):
        yield [samples[i] for i in order[s : s + size]]


def evaluate_samples(model, samples, k: int, seed: int, batch_size: int = 16):
    if not samples:
        raise ValueError("evaluation split is empty")
    reports = []
    for s in range(0, len(samples), batch_size):
        _, rep = mmd_select(model, samples[s : s + batch_size], k=k, seed=seed)
        reports.append(rep)
    return aggregate(reports)


def _open_run_dir(run_dir, model_cfg, train_cfg):
    if run_dir is None:
        return None
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_config(model_cfg, train_cfg))
    return open(run_dir / "records.jsonl", "a")


def train_run(train, model, config: TrainConfig, val=None, run_dir=None, on_epoch=None) -> RunRecord:
    """Train ``model`` in place with min-of-N loss and layer-averaged supervision.

    The checkpoint with the best validation part accuracy (MMD over
    ``config.val_k`` branches) is kept on the record and, with ``run_dir``,
    written to ``best.ckpt``; ``last.ckpt`` is the final state.
    """
    train = list(train)
    _check_compatible(train, model.config)
    val = list(val) if val else train
    record = RunRecord(seed=config.seed)
    params = dict(model.named_parameters())
    state = AdamState()
    sink = _open_run_dir(run_dir, model.config, config)
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            totals = []
            for chunk in _batches(train, config.batch_size, config.seed, epoch):
                batch = collate(chunk, model.config)
                loss, _, _ = mon_loss(model, batch, config.n_mon, config.seed, epoch, config)
                grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()), allow_unused=True)))
                adamw_step(params, grads, state, config)
                totals.append(loss.item() * batch.size)
            entry = {"epoch": epoch, "loss": sum(totals) / len(train), "seconds": time.perf_counter() - t0}
            if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
                rep = evaluate_samples(model, val, config.val_k, config.seed)
                entry.update({"val_pa": rep.pa, "val_ca": rep.ca, "val_scd": rep.scd})
                if rep.pa > record.best_pa:
                    record.best_pa, record.best_epoch = rep.pa, epoch
                    record.best_checkpoint = checkpoint.save(
                        None if run_dir is None else Path(run_dir) / "best.ckpt", model, _meta(config, epoch)
                    )
            record.append(entry, sink)
            log.info("epoch %d loss %.5f", epoch, entry["loss"])
            if on_epoch is not None:
                on_epoch(entry)
        if run_dir is not None:
            checkpoint.save(Path(run_dir) / "last.ckpt", model, _meta(config, config.epochs - 1))
    finally:
        if sink is not None:
            sink.close()
    return record


def _meta(config: TrainConfig, epoch: int, kind: str = "assembly") -> dict:
    return {"kind": kind, "epoch": epoch, "train": dataclasses.asdict(config)}


def evaluate_run(samples, ckpt, k: int = 10, seed: int = 0, batch_size: int = 16):
    """MMD-selected metrics averaged over ``samples``; ``ckpt`` is a path, bytes or a model."""
    if not samples:
        raise ValueError("evaluation split is empty")
    model = ckpt if isinstance(ckpt, torch.nn.Module) else checkpoint.load_model(ckpt)[0]
    return evaluate_samples(model, list(samples), k, seed, batch_size)


# -- in-process fine-tuning ---------------------------------------------------------

def warm_start_decoder(model):
    """Copy encoder weights into the decoder wherever the layout coincides."""
    with torch.no_grad():
        for enc, dec in zip(model.enc_proj, model.dec_proj):
            dec.load_state_dict(enc.state_dict())
        for enc, dec in zip(model.enc_blocks, model.dec_blocks):
            dec.n1.load_state_dict(enc.n1.state_dict())
            dec.self_attn.load_state_dict(enc.attn.state_dict())
            dec.n3.load_state_dict(enc.n2.state_dict())
            dec.ffn.load_state_dict(enc.ffn.state_dict())
        model.dec_head.load_state_dict(model.head.state_dict())
        model.dec_head_norm.load_state_dict(model.head_norm.state_dict())


def inprocess_episode(sample, drop_prob: float, seed: int, epoch: int):
    """One query part plus a PartDrop-thinned remainder; returns ``(sub_sample, query_slot)``."""
    rng = np.random.default_rng([seed, epoch, sample_key(sample.id), 7])
    q = int(rng.integers(sample.n_parts))
    rest = [i for i in range(sample.n_parts) if i != q]
    keep = [rest[k] for k in survivors(rng, len(rest), drop_prob)]
    chosen = sorted(keep + [q])
    return subset(sample, chosen), chosen.index(q)


def decoder_losses(model, batch: Batch, query, noise, cfg: TrainConfig | None = None):
    """Layer-averaged loss of the query parts, one per sample: ``(B,)``."""
    poses = inprocess_predict(model, batch, query, noise)  # (L, B, 7)
    L, B = poses.shape[:2]
    rows = torch.arange(B)
    q = torch.as_tensor(query)
    pts = batch.points[rows, q][:, None]
    gt = batch.gt[rows, q][:, None]
    live = torch.ones(L * B, 1, dtype=torch.bool)
    lt, lr, ls = loss_terms(poses.reshape(L * B, 1, 7), gt.repeat(L, 1, 1), pts.repeat(L, 1, 1, 1), live)
    total = weighted(lt, lr, ls, cfg, live, pts.shape[2]).reshape(L, B).mean(0)
    return total


def inprocess_finetune(model, samples, config: TrainConfig, epochs: int | None = None, run_dir=None) -> RunRecord:
    """Train only the decoder on one-part-missing episodes with PartDrop on the memory.

    The encoder is frozen; its parameters are bitwise unchanged afterwards.
    """
    if model is None:
        raise ValueError("in-process fine-tuning needs a trained encoder checkpoint")
    samples = [s for s in samples if s.n_parts >= 2]
    _check_compatible(samples, model.config)
    epochs = config.finetune_epochs if epochs is None else epochs
    warm_start_decoder(model)
    dec = model.decoder_parameters()
    frozen = list(model.encoder_parameters().values())
    for p in frozen:
        p.requires_grad_(False)
    state = AdamState()
    record = RunRecord(seed=config.seed)
    sink = _open_run_dir(run_dir, model.config, config)
    n = config.n_mon
    try:
        for epoch in range(epochs):
            totals = []
            for chunk in _batches(samples, config.batch_size, config.seed, 10_000 + epoch):
                episodes = [inprocess_episode(s, config.drop_prob, config.seed, epoch) for s in chunk]
                batch = collate([e[0] for e in episodes], model.config)
                query = [e[1] for e in episodes]
                B = batch.size
                noise = batch_noise(batch, model.config.noise_dim, config.seed, epoch, range(n))
                with torch.no_grad():
                    big = batch.repeat(n)
                    losses = decoder_losses(model, big, query * n, noise, config).reshape(n, B)
                best = torch.argmin(losses, dim=0)
                chosen = noise.reshape(n, B, *noise.shape[1:])[best, torch.arange(B)]
                loss = decoder_losses(model, batch, query, chosen, config).mean()
                grads = dict(zip(dec, torch.autograd.grad(loss, list(dec.values()))))
                adamw_step(dec, grads, state, config)
                totals.append(loss.item() * B)
            record.append({"epoch": epoch, "loss": sum(totals) / len(samples)}, sink)
        if run_dir is not None:
            checkpoint.save(Path(run_dir) / "inprocess.ckpt", model, _meta(config, epochs - 1, "inprocess"))
    finally:
        for p in frozen:
            p.requires_grad_(True)
        if sink is not None:
            sink.close()
    return record


def inprocess_evaluate(model, samples, seed: int = 0):
    reports = [inprocess_eval(model, s, seed) for s in samples if s.n_parts >= 2]
    if not reports:
        raise ValueError("no multi-part samples to evaluate")
    return aggregate(reports)

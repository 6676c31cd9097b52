"""Command-line entry point: ``partassembly <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint, datafile, gradsuite, training
from .config import PRESETS, dump_config, load_config
from .geometry import Pose, apply_pose
from .metrics import mmd_select
from .model import AssemblyNet
from .synthetic import CATEGORIES, generate

RUN_DIR_ENV = "PARTASSEMBLY_RUN_DIR"
GRAD_TOL = 1e-3

log = logging.getLogger("partassembly")


class CliError(Exception):
    """Runtime failure reported as a one-line diagnostic with exit status 1."""


def _parse_value(text: str):
    return yaml.safe_load(text)


def _overrides(pairs) -> dict:
    """``section.key=value`` flags to a nested override dict."""
    out: dict = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise CliError(f"bad --set {pair!r}; expected section.key=value")
        out.setdefault(section, {})[name] = _parse_value(value)
    return out


def _configs(args, extra: dict | None = None):
    overrides = _overrides(getattr(args, "set", None))
    for section, values in (extra or {}).items():
        overrides.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    try:
        return load_config(args.config_file, preset=args.config, overrides=overrides)
    except (ValueError, TypeError) as exc:
        raise CliError(f"config: {exc}") from exc


def _run_dir(args) -> Path:
    root = args.run_dir or os.environ.get(RUN_DIR_ENV) or "runs"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_samples(path, split=None):
    try:
        samples = datafile.load(path, split)
    except FileNotFoundError as exc:
        raise CliError(f"no such dataset: {path}") from exc
    except datafile.DatasetError as exc:
        raise CliError(f"{path}: {exc}") from exc
    if not samples:
        raise CliError(f"{path}: split {split!r} is empty")
    return samples


def _model_for(args, model_cfg, samples):
    if args.ckpt == "untrained":
        cfg = dataclasses.replace(model_cfg, n_pc=samples[0].parts[0].shape[0])
        return AssemblyNet(cfg, seed=args.seed)
    try:
        return checkpoint.load_model(args.ckpt, seed=args.seed)[0]
    except FileNotFoundError as exc:
        raise CliError(f"no such checkpoint: {args.ckpt}") from exc
    except checkpoint.CheckpointError as exc:
        raise CliError(f"{args.ckpt}: {exc}") from exc


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _, _, spec = _configs(args, {"data": {"category": args.category, "count": args.count, "seed": args.seed, "n_pc": args.n_pc}})
    samples = generate(spec)
    datafile.save(args.out, samples)
    print(f"wrote {len(samples)} {spec.category} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg, _ = _configs(args, {"train": {"epochs": args.epochs, "seed": args.seed}})
    train = _load_samples(args.data, "train" if not args.all_splits else None)
    val = datafile.load(args.data, "val") if not args.all_splits else None
    run_dir = _run_dir(args)
    model_cfg = dataclasses.replace(model_cfg, n_pc=train[0].parts[0].shape[0])
    (run_dir / "effective.yaml").write_text(dump_config(model_cfg, train_cfg))
    if args.finetune_from:
        model = checkpoint.load_model(args.finetune_from, seed=train_cfg.seed)[0]
        rec = training.inprocess_finetune(model, train, train_cfg, run_dir=run_dir)
        print(f"fine-tuned decoder for {len(rec.epochs)} epochs; checkpoint {run_dir / 'inprocess.ckpt'}")
        return 0
    model = AssemblyNet(model_cfg, seed=train_cfg.seed)
    rec = training.train_run(train, model, train_cfg, val=val or None, run_dir=run_dir)
    print(f"trained {len(rec.epochs)} epochs; best val PA {rec.best_pa:.2f} at epoch {rec.best_epoch}; run dir {run_dir}")
    return 0


def cmd_eval(args) -> int:
    model_cfg, train_cfg, _ = _configs(args)
    samples = _load_samples(args.data, args.split)
    model = _model_for(args, model_cfg, samples)
    k = args.k or train_cfg.eval_k
    report = training.evaluate_samples(model, samples, k, args.seed)
    print(report.table())
    out = args.records or (_run_dir(args) / "eval.jsonl")
    Path(out).write_text(report.records())
    return 0


def _write_ply(path: Path, clouds) -> int:
    rows = [(p, i) for i, c in enumerate(clouds) for p in np.asarray(c, dtype=np.float64)]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(rows)}",
        "property float x",
        "property float y",
        "property float z",
        "property int part",
        "end_header",
    ]
    lines += [f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {i}" for p, i in rows]
    path.write_text("\n".join(lines) + "\n")
    return len(rows)


def read_ply(path) -> np.ndarray:
    """Vertices of an ASCII PLY written by ``assemble`` as an ``(n, 4)`` array (x, y, z, part)."""
    text = Path(path).read_text().splitlines()
    end = text.index("end_header")
    count = next(int(line.split()[-1]) for line in text[:end] if line.startswith("element vertex"))
    body = np.loadtxt(text[end + 1 :], ndmin=2) if count else np.zeros((0, 4))
    if body.shape[0] != count:
        raise ValueError(f"{path}: header says {count} vertices, found {body.shape[0]}")
    return body


def cmd_assemble(args) -> int:
    model_cfg, train_cfg, _ = _configs(args)
    samples = _load_samples(args.data)
    match = [s for s in samples if s.id == args.shape] if args.shape else samples[args.index : args.index + 1]
    if not match:
        raise CliError(f"shape {args.shape or args.index} not found in {args.data}")
    sample = match[0]
    model = _model_for(args, model_cfg, [sample])
    pred, report = mmd_select(model, sample, k=args.k or train_cfg.eval_k, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    placed = [apply_pose(Pose.from_vector(p), c) for p, c in zip(pred, sample.parts)]
    truth = [apply_pose(p, c) for p, c in zip(sample.gt_poses, sample.parts)]
    n_pred = _write_ply(out / f"{sample.id}_pred.ply", placed)
    _write_ply(out / f"{sample.id}_gt.ply", truth)
    (out / f"{sample.id}_poses.json").write_text(json.dumps({"id": sample.id, "pred": np.asarray(pred).tolist()}, indent=1))
    print(report.table())
    print(f"wrote {n_pred} points per assembly to {out}")
    return 0


def cmd_inprocess_eval(args) -> int:
    model_cfg, _, _ = _configs(args)
    samples = [s for s in _load_samples(args.data, args.split) if s.n_parts >= 2]
    if not samples:
        raise CliError("no multi-part shapes to evaluate")
    model = _model_for(args, model_cfg, samples)
    report = training.inprocess_evaluate(model, samples, args.seed)
    print(report.table())
    out = args.records or (_run_dir(args) / "inprocess.jsonl")
    Path(out).write_text(report.records())
    return 0


def cmd_gradcheck(args) -> int:
    if args.config != "tiny":
        log.warning("the gradient suite always runs at the tiny configuration")
    report = gradsuite.run(seed=args.seed, eps=args.eps)
    if args.verbose:
        print("\n".join(report.lines()))
    print(f"max rel err {report.worst:.3e} ({report.worst_name}) over {len(report.errors)} checks in {report.seconds:.1f}s")
    if report.worst >= GRAD_TOL:
        raise CliError(f"gradient check failed: {report.worst:.3e} >= {GRAD_TOL:g}")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="desk", choices=sorted(PRESETS), help="base preset")
    common.add_argument("--config-file", help="YAML file with model/train/data sections")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--run-dir", help=f"output directory (default ${RUN_DIR_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="partassembly", description="Part assembly with instance-encoded transformers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset file")
    p.add_argument("--category", choices=CATEGORIES, default="chair")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--n-pc", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model (or fine-tune its decoder)")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--all-splits", action="store_true", help="train on every sample regardless of split")
    p.add_argument("--finetune-from", metavar="CKPT", help="freeze this encoder and train the in-process decoder")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "MMD-selected metrics on a split"), ("inprocess-eval", cmd_inprocess_eval, "one-part-missing metrics")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--ckpt", required=True, help="checkpoint path, or 'untrained'")
        p.add_argument("--split", default=None, help="train, val or test (default: all)")
        p.add_argument("--records", help="where to write line-delimited records")
        if name == "eval":
            p.add_argument("-k", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("assemble", parents=[common], help="export predicted and ground-truth assemblies as PLY")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--shape", help="sample id")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("-k", type=int)
    p.add_argument("--out", default="assembled")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--eps", type=float, default=gradsuite.EPS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

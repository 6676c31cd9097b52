"""scikit-learn style wrappers around the assembly network.

``X`` is a list of :class:`AssemblySample` or a list of shapes given as lists
of canonical ``(n_pc, 3)`` part clouds. Poses are ``(N, 7)`` arrays holding a
``(w, x, y, z)`` quaternion followed by a translation.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import checkpoint, training
from .batch import batch_noise, collate
from .config import ModelConfig, TrainConfig
from .geometry import Pose, apply_pose
from .metrics import EVAL_EPOCH, inprocess_predict, predict_branches
from .model import AssemblyNet
from .validation import check_positive_int, check_probability, check_samples, has_ground_truth


class PartAssembler(BaseEstimator):
    """Predict a 6-DoF pose for every part of a shape.

    Hyperparameters mirror :class:`ModelConfig` and :class:`TrainConfig`.
    ``k`` is the number of noise branches drawn when scoring (the branch
    closest to ground truth is kept). ``chamfer_norm`` defaults to ``"mean"``
    as in the desk preset.
    """

    def __init__(
        self,
        d_model=256,
        n_heads=4,
        n_layers=6,
        noise_dim=64,
        max_parts=20,
        n_pc=128,
        head_hidden=256,
        encoding="both",
        dtype="float64",
        lr=1.5e-4,
        weight_decay=1e-4,
        batch_size=8,
        epochs=200,
        n_mon=5,
        eval_every=10,
        val_k=3,
        k=10,
        seed=0,
        chamfer_norm="mean",
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.noise_dim = noise_dim
        self.max_parts = max_parts
        self.n_pc = n_pc
        self.head_hidden = head_hidden
        self.encoding = encoding
        self.dtype = dtype
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.n_mon = n_mon
        self.eval_every = eval_every
        self.val_k = val_k
        self.k = k
        self.seed = seed
        self.chamfer_norm = chamfer_norm

    # configs are rebuilt from the params so set_params stays the single source of truth
    def model_config(self) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        return ModelConfig(**{n: v for n, v in self.get_params().items() if n in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{n: v for n, v in self.get_params().items() if n in names}, eval_k=self.k)

    @classmethod
    def from_configs(cls, model: ModelConfig, train: TrainConfig, **extra):
        names = set(cls._get_param_names())
        values = {**dataclasses.asdict(model), **dataclasses.asdict(train), **extra}
        values.setdefault("k", train.eval_k)
        return cls(**{n: v for n, v in values.items() if n in names})

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def fit(self, X, y=None, X_val=None, run_dir=None):
        """Train on ``X``; ``y`` is ignored because ground-truth poses live on the samples."""
        cfg = self.model_config()
        samples = check_samples(X, cfg)
        if not has_ground_truth(samples):
            raise ValueError("fit needs AssemblySample inputs with ground-truth poses")
        val = check_samples(X_val, cfg) if X_val is not None else None
        self.model_ = AssemblyNet(cfg, seed=self.seed)
        self.record_ = training.train_run(samples, self.model_, self.train_config(), val=val, run_dir=run_dir)
        if self.record_.best_checkpoint is not None:
            self.model_, _ = checkpoint.load_model(self.record_.best_checkpoint, seed=self.seed)
        self.n_features_in_ = cfg.n_pc
        return self

    def load(self, source):
        """Adopt a saved network; the estimator's params are updated to match it."""
        model, _ = checkpoint.load_model(source, seed=self.seed)
        self.set_params(**{k: v for k, v in dataclasses.asdict(model.config).items() if k in self.get_params()})
        self.model_ = model
        self.n_features_in_ = model.config.n_pc
        return self

    def save(self, path=None, meta=None) -> bytes:
        self._check_fitted()
        return checkpoint.save(path, self.model_, meta)

    def predict_branches(self, X, k=None) -> list[np.ndarray]:
        """Per shape, a ``(k, N, 7)`` array of poses from ``k`` noise draws."""
        self._check_fitted()
        k = check_positive_int(self.k if k is None else k, "k")
        samples = check_samples(X, self.model_.config)
        branches, _ = predict_branches(self.model_, samples, k, self.seed)
        return [branches[:, b, : s.n_parts].numpy() for b, s in enumerate(samples)]

    def predict(self, X) -> list[np.ndarray]:
        """One ``(N, 7)`` pose array per shape, from the first noise draw."""
        return [b[0] for b in self.predict_branches(X, k=1)]

    def transform(self, X) -> list[np.ndarray]:
        """Assembled shapes: per shape an ``(N, n_pc, 3)`` array of posed part clouds."""
        samples = check_samples(X, getattr(getattr(self, "model_", None), "config", None))
        poses = self.predict(samples)
        return [np.stack([apply_pose(Pose.from_vector(p), c) for p, c in zip(pose, s.parts)]) for pose, s in zip(poses, samples)]

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(X)

    def evaluate(self, X, k=None):
        """MetricReport over ``X`` with per-shape best-of-``k`` selection."""
        self._check_fitted()
        samples = check_samples(X, self.model_.config)
        if not has_ground_truth(samples):
            raise ValueError("scoring needs ground-truth poses")
        k = check_positive_int(self.k if k is None else k, "k")
        return training.evaluate_samples(self.model_, samples, k, self.seed)

    def score(self, X, y=None) -> float:
        """Part accuracy in percent."""
        return self.evaluate(X).pa


class InProcessAssembler(BaseEstimator):
    """Place one missing part into an otherwise assembled shape.

    ``base`` is a fitted :class:`PartAssembler`, or checkpoint bytes or a path;
    only the decoder is trained, the encoder stays frozen.
    """

    def __init__(self, base=None, drop_prob=0.2, finetune_epochs=500, lr=1.5e-4, weight_decay=1e-4, batch_size=8, n_mon=5, seed=0, chamfer_norm="mean"):
        self.base = base
        self.drop_prob = drop_prob
        self.finetune_epochs = finetune_epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.n_mon = n_mon
        self.seed = seed
        self.chamfer_norm = chamfer_norm

    def _base_model(self):
        if self.base is None:
            raise ValueError("InProcessAssembler needs a trained encoder: pass base=")
        if isinstance(self.base, PartAssembler):
            self.base._check_fitted()
            return checkpoint.load_model(self.base.save(), seed=self.seed)[0]
        return checkpoint.load_model(self.base, seed=self.seed)[0]

    def fit(self, X, y=None, run_dir=None):
        check_probability(self.drop_prob, "drop_prob")
        model = self._base_model()
        samples = check_samples(X, model.config, min_parts=2)
        cfg = TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size, n_mon=self.n_mon,
            seed=self.seed, drop_prob=self.drop_prob, finetune_epochs=self.finetune_epochs,
            chamfer_norm=self.chamfer_norm,
        )
        self.record_ = training.inprocess_finetune(model, samples, cfg, run_dir=run_dir)
        self.model_ = model
        return self

    def predict(self, X, query) -> np.ndarray:
        """Pose ``(7,)`` per shape for part ``query[b]``, the rest held at ground truth."""
        if not hasattr(self, "model_"):
            raise NotFittedError("InProcessAssembler is not fitted yet; call fit first")
        samples = check_samples(X, self.model_.config, min_parts=2)
        query = np.broadcast_to(np.asarray(query, dtype=int), (len(samples),))
        for s, q in zip(samples, query):
            if not 0 <= q < s.n_parts:
                raise ValueError(f"query {q} out of range for shape {s.id} with {s.n_parts} parts")
        batch = collate(samples, self.model_.config)
        noise = batch_noise(batch, self.model_.config.noise_dim, self.seed, EVAL_EPOCH, [0])
        with torch.no_grad():
            poses = inprocess_predict(self.model_, batch, query.tolist(), noise)
        return poses[-1].to(torch.float64).numpy()

    def evaluate(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("InProcessAssembler is not fitted yet; call fit first")
        samples = check_samples(X, self.model_.config, min_parts=2)
        return training.inprocess_evaluate(self.model_, samples, self.seed)

    def score(self, X, y=None) -> float:
        """Connectivity accuracy in percent over one-part-missing episodes."""
        ca = self.evaluate(X).ca
        return float("nan") if ca is None else ca

"""Loss, Adam, the epoch loop, and the K-fold cross-validation harness.

Everything here is deterministic from (config, seed): fold assignment,
per-fold weight init, per-epoch shuffling, and dropout masks all derive
their randomness from explicit seed tuples, so two identical runs produce
byte-identical reports.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import vit as vit_mod
from .bilstm import BiLSTMWeights, LSTMConfig, bilstm_forward, classify_sequence, predicted_class
from .errors import ConfigError, DataError, NumericError
from .kernels import concat, reshape, sparse_ce_loss
from .metrics import CrossValReport, MetricsReport, aggregate_folds, confusion, metrics
from .tensor import Tensor

__all__ = [
    "AdamConfig", "AdamState", "adam_step", "TrainConfig", "kfold_split",
    "stratified_kfold_split", "train_head", "evaluate_head", "fit",
    "TrainReport", "sparse_ce_loss",
]


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1/beta2 must be in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
        }


@dataclass
class AdamState:
    moments: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (m, v)
    step_count: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            moments={
                n: (np.zeros_like(p.data), np.zeros_like(p.data))
                for n, p in params.items()
            }
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, cfg: AdamConfig):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ConfigError(
                f"gradient for {name!r} has shape {g.shape}, param is {p.data.shape}"
            )
        m, v = state.moments[name]
        m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = (
            p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        ).astype(p.data.dtype)
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 25
    folds: int = 10
    seed: int = 0
    fine_tune_vit: bool = False
    stratified: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "folds": self.folds,
            "seed": self.seed,
            "fine_tune_vit": self.fine_tune_vit,
            "stratified": self.stratified,
        }


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of 0..n-1 cut into k near-equal contiguous chunks."""
    if n < k:
        raise ConfigError(f"cannot split {n} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(order, k)]


def stratified_kfold_split(labels, k: int, seed: int) -> list[np.ndarray]:
    """Like kfold_split but spreads each class round-robin across folds."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < k:
        raise ConfigError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        for i in idx:
            folds[cursor % k].append(int(i))
            cursor += 1
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


# ---------------------------------------------------------------------------
# training


def _forward_probs(feats, weights, lstm_cfg, training, rng_seed):
    rep = bilstm_forward(feats, weights, lstm_cfg, training=training,
                         rng_seed=rng_seed)
    return classify_sequence(rep, weights)


def train_head(
    features,
    labels,
    lstm_cfg: LSTMConfig,
    adam_cfg: AdamConfig,
    epochs: int,
    batch_size: int,
    seed: int,
    fold: int = 0,
    start_epoch: int = 0,
    weights: BiLSTMWeights | None = None,
    adam_state: AdamState | None = None,
    fine_tune=None,
):
    """Train the Bi-LSTM head on a list of per-sample T x D_f feature
    arrays. Returns (weights, adam_state, epoch_losses).

    ``fine_tune`` optionally carries (vit_cfg, vit_weights, slices) where
    ``slices`` holds the prepared slice images per sample; features are
    then recomputed differentiably every batch so gradients reach the
    encoder.
    """
    n = len(labels)
    if n == 0:
        raise DataError("empty training set")
    labels = [int(l) for l in labels]
    if weights is None:
        # per-fold re-initialization: folds must be independent
        weights = BiLSTMWeights.init(lstm_cfg, (seed, fold))
    params = dict(weights.named_tensors())
    if fine_tune is not None:
        vit_cfg, vit_weights, slices = fine_tune
        vit_weights.set_requires_grad(True)
        params.update(vit_weights.named_tensors())
    if adam_state is None:
        adam_state = AdamState.init(params)
    for p in params.values():
        p.requires_grad = True

    epoch_losses: list[float] = []
    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng((seed, fold, epoch)).permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            batch = order[lo:lo + batch_size]
            for p in params.values():
                p.zero_grad()
            rows = []
            for idx in batch:
                idx = int(idx)
                if fine_tune is not None:
                    feats = vit_mod.extract_slice_features_traced(
                        slices[idx], vit_cfg, vit_weights
                    )
                else:
                    feats = features[idx]
                probs = _forward_probs(
                    feats, weights, lstm_cfg, training=True,
                    rng_seed=(seed, fold, epoch, idx),
                )
                rows.append(reshape(probs, (1, lstm_cfg.num_classes)))
            loss = sparse_ce_loss(concat(rows, axis=0), [labels[int(i)] for i in batch])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at fold {fold} epoch {epoch}")
            loss.backward()
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()
            }
            adam_step(params, grads, adam_state, adam_cfg)
            total += value * len(batch)
        epoch_losses.append(total / n)
    if fine_tune is not None:
        vit_weights.set_requires_grad(False)
    weights.set_requires_grad(False)
    return weights, adam_state, epoch_losses


def evaluate_head(features, labels, weights: BiLSTMWeights, lstm_cfg: LSTMConfig):
    """Deterministic inference pass. Returns (predictions, probabilities)."""
    preds = []
    probs = []
    for feats in features:
        p = _forward_probs(feats, weights, lstm_cfg, training=False, rng_seed=0)
        preds.append(predicted_class(p))
        probs.append(p.data.copy())
    return preds, probs


# ---------------------------------------------------------------------------
# the K-fold harness


@dataclass
class TrainReport:
    epoch_losses: list[float]
    fold_results: list[dict]
    crossval: CrossValReport
    seed: int
    config: dict
    trainable_params: int
    wall_clock_s: float = field(default=0.0, compare=False)
    fold_weights: list = field(default_factory=list, compare=False, repr=False)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "epoch_losses": self.epoch_losses,
            "folds": self.fold_results,
            "crossval": self.crossval.to_dict(),
            "seed": self.seed,
            "config": self.config,
            "trainable_params": self.trainable_params,
        }
        if include_timing:
            d["wall_clock_s"] = self.wall_clock_s
        return d

    def to_json(self, include_timing: bool = False) -> str:
        # timing excluded by default so identical runs serialize identically
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


def fit(
    dataset,
    train_cfg: TrainConfig,
    lstm_cfg: LSTMConfig,
    adam_cfg: AdamConfig,
    vit_cfg=None,
    vit_weights=None,
    slice_count: int = 50,
    norm: dict | None = None,
) -> TrainReport:
    """K-fold cross-validation over a Dataset (or list of Samples).

    Samples carrying precomputed features are used as-is; samples carrying
    volumes are reduced to features once up front (encoder frozen) unless
    fine_tune_vit is set, in which case the encoder trains along with the
    head.
    """
    from .volume import volume_to_slices

    samples = dataset.samples if hasattr(dataset, "samples") else list(dataset)
    if not samples:
        raise DataError("empty dataset")
    labels = [int(s.label) for s in samples]
    for s in samples:
        if not 0 <= s.label < lstm_cfg.num_classes:
            raise DataError(
                f"sample {s.sid}: label {s.label} outside [0, {lstm_cfg.num_classes})"
            )

    mean = norm.get("mean") if norm else None
    std = norm.get("std") if norm else None
    prepared_slices = None
    features: list[np.ndarray | None] = []
    if train_cfg.fine_tune_vit:
        if vit_cfg is None or vit_weights is None:
            raise ConfigError("fine_tune_vit requires encoder config and weights")
        prepared_slices = []
        for s in samples:
            if s.volume is None:
                raise DataError(f"sample {s.sid}: fine-tuning needs raw volumes")
            prepared_slices.append(
                volume_to_slices(s.volume, vit_cfg, slice_count, mean, std)
            )
        features = [None] * len(samples)
    else:
        for s in samples:
            if s.features is not None:
                features.append(np.asarray(s.features, dtype=np.float32))
            else:
                if vit_cfg is None or vit_weights is None:
                    raise ConfigError(
                        f"sample {s.sid} has no features and no encoder was given"
                    )
                imgs = volume_to_slices(s.volume, vit_cfg, slice_count, mean, std)
                features.append(
                    vit_mod.extract_slice_features(imgs, vit_cfg, vit_weights)
                )

    n = len(samples)
    if train_cfg.stratified:
        folds = stratified_kfold_split(labels, train_cfg.folds, train_cfg.seed)
    else:
        folds = kfold_split(n, train_cfg.folds, train_cfg.seed)

    started = time.monotonic()
    fold_weights = []
    fold_results = []
    fold_metric_reports: list[MetricsReport] = []
    per_fold_losses = []
    trainable = 0
    for f, eval_idx in enumerate(folds):
        eval_set = set(int(i) for i in eval_idx)
        train_idx = [i for i in range(n) if i not in eval_set]
        train_labels = [labels[i] for i in train_idx]
        if len(set(train_labels)) < 2:
            raise DataError(f"fold {f}: training folds contain a single class")
        fine_tune = None
        if train_cfg.fine_tune_vit:
            fine_tune = (vit_cfg, vit_weights, [prepared_slices[i] for i in train_idx])
        weights, _, losses = train_head(
            features=[features[i] for i in train_idx],
            labels=train_labels,
            lstm_cfg=lstm_cfg,
            adam_cfg=adam_cfg,
            epochs=train_cfg.epochs,
            batch_size=train_cfg.batch_size,
            seed=train_cfg.seed,
            fold=f,
            fine_tune=fine_tune,
        )
        fold_weights.append(weights)
        trainable = weights.param_count()
        if train_cfg.fine_tune_vit:
            trainable += vit_weights.param_count()

        eval_sorted = sorted(eval_set)
        if train_cfg.fine_tune_vit:
            eval_features = [
                vit_mod.extract_slice_features(prepared_slices[i], vit_cfg, vit_weights)
                for i in eval_sorted
            ]
        else:
            eval_features = [features[i] for i in eval_sorted]
        preds, _ = evaluate_head(
            eval_features, [labels[i] for i in eval_sorted], weights, lstm_cfg
        )
        cm = confusion(preds, [labels[i] for i in eval_sorted],
                       num_classes=lstm_cfg.num_classes)
        fold_metrics = metrics(cm)
        fold_metric_reports.append(fold_metrics)
        per_fold_losses.append(losses)
        fold_results.append({
            "fold": f,
            "train_indices": [int(i) for i in train_idx],
            "eval_indices": [int(i) for i in eval_sorted],
            "epoch_losses": [float(x) for x in losses],
            "metrics": fold_metrics.to_dict(),
        })

    epoch_losses = [
        float(np.mean([fl[e] for fl in per_fold_losses]))
        for e in range(train_cfg.epochs)
    ]
    config_echo = {
        "train": train_cfg.to_dict(),
        "lstm": lstm_cfg.to_dict(),
        "adam": adam_cfg.to_dict(),
    }
    if vit_cfg is not None:
        config_echo["vit"] = vit_cfg.to_dict()
        config_echo["slice_count"] = slice_count
    return TrainReport(
        epoch_losses=epoch_losses,
        fold_results=fold_results,
        crossval=aggregate_folds(fold_metric_reports),
        seed=train_cfg.seed,
        config=config_echo,
        trainable_params=trainable,
        wall_clock_s=time.monotonic() - started,
        fold_weights=fold_weights,
    )

"""Class-weighted joint loss, the per-fold training loop, and the 5-fold
cross-validation driver.

Determinism contract: a fold is fully determined by (dataset, configs,
seed). The fold seed is base seed + fold index; model init, epoch
shuffling and dropout each draw from their own child stream of it.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import data, dsp, metrics
from .autodiff import Tensor, backward, exp, log, no_grad
from .errors import ConfigError, InputError, TrainingDiverged
from .model import build_variant
from .nn import adam_step

SELECT_METRICS = ("joint_accuracy", "sed_accuracy", "soc_accuracy")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    seed: int = 0
    select_metric: str = "joint_accuracy"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.select_metric not in SELECT_METRICS:
            raise ConfigError(
                f"select_metric must be one of {SELECT_METRICS}, "
                f"got {self.select_metric!r}"
            )


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_sed_acc: float
    val_soc_acc: float
    val_joint_acc: float
    wall_time_s: float

    def select(self, metric):
        return {
            "joint_accuracy": self.val_joint_acc,
            "sed_accuracy": self.val_sed_acc,
            "soc_accuracy": self.val_soc_acc,
        }[metric]


@dataclass
class TrainResult:
    logs: list
    best_epoch: int
    best_metric: float


def weighted_cross_entropy(logits, labels, weights):
    """Weighted mean of per-sample negative log-likelihoods.

    loss = sum_i w[y_i] * (-log softmax(logits_i)[y_i]) / sum_i w[y_i]
    """
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels outside 0..{k - 1}")
    weights = np.asarray(weights, dtype=np.float64)
    # max-shift is softmax-invariant, so treating it as a constant is exact
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - shift
    lse = log(exp(shifted).sum(axis=1, keepdims=True))
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = (shifted * Tensor(onehot)).sum(axis=1, keepdims=True)
    sample_weights = weights[labels].reshape(b, 1)
    total = ((lse - picked) * Tensor(sample_weights)).sum()
    return total * (1.0 / sample_weights.sum())


def joint_loss(outputs, sed_labels, soc_labels, cw):
    """Sum of the two task losses with unit task weights."""
    return weighted_cross_entropy(
        outputs.sed_logits, sed_labels, cw.sed
    ) + weighted_cross_entropy(outputs.soc_logits, soc_labels, cw.soc)


def _validate(model, features, sed, soc, ids, cw, batch_size):
    losses = []
    sed_pred, soc_pred = [], []
    with no_grad():
        for start in range(0, len(ids), batch_size):
            batch = ids[start : start + batch_size]
            out = model.forward(features[batch], train=False)
            loss = joint_loss(out, sed[batch], soc[batch], cw)
            losses.append((loss.item(), len(batch)))
            sed_pred.append(np.argmax(out.sed_logits.data, axis=1))
            soc_pred.append(np.argmax(out.soc_logits.data, axis=1))
    sed_pred = np.concatenate(sed_pred)
    soc_pred = np.concatenate(soc_pred)
    val_loss = sum(l * n for l, n in losses) / max(len(ids), 1)
    return (
        val_loss,
        metrics.accuracy(sed_pred, sed[ids]),
        metrics.accuracy(soc_pred, soc[ids]),
        metrics.joint_accuracy(sed_pred, sed[ids], soc_pred, soc[ids]),
    )


def train_fold(model, features, sed, soc, split, cfg, cw, on_epoch=None):
    """Train one fold; restore the best-validation checkpoint at the end.

    Shuffles the training ids with a seeded stream each epoch, keeps the
    final incomplete batch, aborts on a non-finite loss, and retains the
    parameter snapshot maximizing `cfg.select_metric` on the validation
    split (ties resolve to the earlier epoch). `on_epoch(log) -> bool` may
    request an early end of the loop (used by harnesses; the CLI never
    sets it).
    """
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    params = model.trainable_parameters()
    logs = []
    best_metric = -np.inf
    best_epoch = -1
    best_state = None
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(split.train_ids)
        total = 0.0
        for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            out = model.forward(features[batch], train=True, rng=dropout_rng)
            loss = joint_loss(out, sed[batch], soc[batch], cw)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, batch_index, value)
            backward(loss)
            adam_step(params, cfg.lr)
            total += value * len(batch)
        train_loss = total / len(order)
        val_loss, sed_acc, soc_acc, joint_acc = _validate(
            model, features, sed, soc, split.val_ids, cw, cfg.batch_size
        )
        log = EpochLog(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            val_sed_acc=sed_acc,
            val_soc_acc=soc_acc,
            val_joint_acc=joint_acc,
            wall_time_s=time.perf_counter() - t0,
        )
        logs.append(log)
        metric = log.select(cfg.select_metric)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = model.state_arrays()
        if on_epoch is not None and on_epoch(log):
            break
    model.load_state_arrays(best_state)
    return TrainResult(logs=logs, best_epoch=best_epoch, best_metric=best_metric)


@dataclass
class FoldOutcome:
    fold_index: int
    seed: int
    report: metrics.FoldReport
    logs: list
    best_epoch: int
    state: dict
    stats: tuple
    evaluation: metrics.FoldEvaluation


@dataclass
class CvResult:
    plan: data.SplitPlan
    folds: list
    aggregate: dict

    @property
    def reports(self):
        return [f.report for f in self.folds]


def _run_fold(args, on_epoch=None):
    (fold_index, features, sed, soc, split, model_cfg, train_cfg) = args
    fold_seed = train_cfg.seed + fold_index
    stats = dsp.compute_standardization(features[split.train_ids])
    standardized = dsp.apply_standardization(features, stats)
    cw = data.fold_class_weights(sed[split.train_ids], soc[split.train_ids])
    model = build_variant(model_cfg, seed=fold_seed)
    fold_cfg = replace(train_cfg, seed=fold_seed)
    result = train_fold(model, standardized, sed, soc, split, fold_cfg, cw, on_epoch)
    evaluation = metrics.evaluate_fold(
        model,
        standardized[split.test_ids],
        sed[split.test_ids],
        soc[split.test_ids],
        fold_index=fold_index,
        seed=fold_seed,
        batch_size=fold_cfg.batch_size,
    )
    return FoldOutcome(
        fold_index=fold_index,
        seed=fold_seed,
        report=evaluation.report,
        logs=result.logs,
        best_epoch=result.best_epoch,
        state=model.state_arrays(),
        stats=stats,
        evaluation=evaluation,
    )


def run_cv(features, sed, soc, model_cfg, train_cfg, k=5,
           participant_ids=None, parallel=False, on_epoch=None):
    """Stratified k-fold cross-validation with one fresh model per fold.

    Standardization statistics and class weights come from each fold's
    training split only. Aggregation uses the sample standard deviation.
    `on_epoch` applies to sequential runs only.
    """
    features = np.asarray(features, dtype=np.float64)
    sed = np.asarray(sed)
    soc = np.asarray(soc)
    plan = data.stratified_kfold(
        sed, soc, k=k, seed=train_cfg.seed, participant_ids=participant_ids
    )
    jobs = [
        (i, features, sed, soc, plan.folds[i], model_cfg, train_cfg)
        for i in range(k)
    ]
    if parallel:
        # the hook is process-local state, so parallel runs ignore it
        with ProcessPoolExecutor(max_workers=min(k, 4)) as pool:
            outcomes = list(pool.map(_run_fold, jobs))
    else:
        outcomes = [_run_fold(job, on_epoch) for job in jobs]
    aggregate = metrics.aggregate_reports([o.report for o in outcomes])
    return CvResult(plan=plan, folds=outcomes, aggregate=aggregate)

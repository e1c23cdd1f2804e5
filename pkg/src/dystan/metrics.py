"""Evaluation metrics: per-task accuracy and macro-F1, joint accuracy,
row-normalized confusion matrices, and embedding-space cluster quality
(silhouette, intra-class and inter-class centroid distances).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .autodiff import no_grad
from .errors import InputError, UndefinedMetricError

SCALAR_METRICS = (
    "sed_accuracy",
    "sed_macro_f1",
    "soc_accuracy",
    "soc_macro_f1",
    "joint_accuracy",
    "sed_silhouette",
    "sed_intra_class_distance",
    "sed_inter_class_distance",
    "soc_silhouette",
    "soc_intra_class_distance",
    "soc_inter_class_distance",
)


def _check_lengths(*arrays):
    lengths = {len(a) for a in arrays}
    if len(lengths) != 1:
        raise InputError(f"length mismatch: {[len(a) for a in arrays]}")
    if lengths == {0}:
        raise InputError("empty prediction arrays")


def accuracy(pred, truth):
    """Fraction of exact matches."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_lengths(pred, truth)
    return float(np.mean(pred == truth))


def macro_f1(pred, truth, num_classes):
    """Unweighted mean of per-class F1 over all `num_classes` classes.

    A class with a zero denominator anywhere (precision, recall, or F1)
    contributes 0 but still counts in the average.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_lengths(pred, truth)
    if pred.size and (
        pred.min() < 0 or truth.min() < 0
        or pred.max() >= num_classes or truth.max() >= num_classes
    ):
        raise InputError(f"labels outside 0..{num_classes - 1}")
    scores = []
    for k in range(num_classes):
        tp = int(np.sum((pred == k) & (truth == k)))
        fp = int(np.sum((pred == k) & (truth != k)))
        fn = int(np.sum((pred != k) & (truth == k)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(f1)
    return float(np.mean(scores))


def joint_accuracy(sed_pred, sed_truth, soc_pred, soc_truth):
    """Fraction of samples with both task predictions correct."""
    sed_pred, sed_truth = np.asarray(sed_pred), np.asarray(sed_truth)
    soc_pred, soc_truth = np.asarray(soc_pred), np.asarray(soc_truth)
    _check_lengths(sed_pred, sed_truth, soc_pred, soc_truth)
    return float(np.mean((sed_pred == sed_truth) & (soc_pred == soc_truth)))


def confusion_normalized(pred, truth, num_classes):
    """Row-normalized confusion matrix: entry (i, j) is P(pred=j | truth=i).

    Rows for classes absent from `truth` are all zero.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_lengths(pred, truth)
    counts = np.zeros((num_classes, num_classes))
    for t, p in zip(truth, pred):
        counts[t, p] += 1.0
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        out = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 0.0)
    return out


def _pairwise_distances(embeddings):
    # direct differences: the gram-matrix shortcut loses ~1e-9 to cancellation
    return cdist(embeddings, embeddings)


def silhouette(embeddings, labels):
    """Mean of (b - a) / max(a, b) with Euclidean distances.

    a: mean intra-cluster distance excluding self; b: smallest mean
    distance to another cluster. Singleton-cluster samples score 0.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(embeddings) < 3:
        raise InputError("silhouette needs at least 3 samples")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise UndefinedMetricError("silhouette undefined for a single class")
    dist = _pairwise_distances(embeddings)
    members = {c: np.flatnonzero(labels == c) for c in classes}
    scores = np.empty(len(embeddings))
    for i in range(len(embeddings)):
        own = members[labels[i]]
        if len(own) == 1:
            scores[i] = 0.0
            continue
        a = dist[i, own].sum() / (len(own) - 1)
        b = min(dist[i, members[c]].mean() for c in classes if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def intra_class_distance(embeddings, labels):
    """Unweighted mean (over present classes) of the mean sample-to-centroid
    distance within each class."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(embeddings) == 0:
        raise InputError("empty embedding set")
    per_class = []
    for c in np.unique(labels):
        pts = embeddings[labels == c]
        centroid = pts.mean(axis=0)
        per_class.append(np.linalg.norm(pts - centroid, axis=1).mean())
    return float(np.mean(per_class))


def inter_class_distance(embeddings, labels):
    """Mean pairwise Euclidean distance between class centroids."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise UndefinedMetricError("inter-class distance needs >= 2 classes")
    centroids = np.stack([embeddings[labels == c].mean(axis=0) for c in classes])
    dists = [
        np.linalg.norm(centroids[i] - centroids[j])
        for i in range(len(classes))
        for j in range(i + 1, len(classes))
    ]
    return float(np.mean(dists))


@dataclass
class FoldReport:
    """Everything reported for one cross-validation fold."""

    fold_index: int
    seed: int
    sed_accuracy: float
    sed_macro_f1: float
    soc_accuracy: float
    soc_macro_f1: float
    joint_accuracy: float
    sed_silhouette: float
    sed_intra_class_distance: float
    sed_inter_class_distance: float
    soc_silhouette: float
    soc_intra_class_distance: float
    soc_inter_class_distance: float
    sed_confusion: list = field(default_factory=list)
    soc_confusion: list = field(default_factory=list)

    def scalar_metrics(self):
        return {name: getattr(self, name) for name in SCALAR_METRICS}

    def to_dict(self):
        out = {"fold_index": self.fold_index, "seed": self.seed}
        out.update(self.scalar_metrics())
        out["sed_confusion"] = self.sed_confusion
        out["soc_confusion"] = self.soc_confusion
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class FoldEvaluation:
    report: FoldReport
    sed_pred: np.ndarray
    soc_pred: np.ndarray
    sed_embeddings: np.ndarray
    soc_embeddings: np.ndarray


def predict_batched(model, features, batch_size=64):
    """Eval-mode forward over batches.

    Returns argmax predictions (ties resolve to the lowest class index)
    and the pooled per-task embeddings.
    """
    sed_pred, soc_pred, sed_emb, soc_emb = [], [], [], []
    with no_grad():
        for start in range(0, len(features), batch_size):
            out = model.forward(features[start : start + batch_size], train=False)
            sed_pred.append(np.argmax(out.sed_logits.data, axis=1))
            soc_pred.append(np.argmax(out.soc_logits.data, axis=1))
            sed_emb.append(out.sed_embedding.data)
            soc_emb.append(out.soc_embedding.data)
    return (
        np.concatenate(sed_pred),
        np.concatenate(soc_pred),
        np.concatenate(sed_emb),
        np.concatenate(soc_emb),
    )


def evaluate_fold(model, features, sed_truth, soc_truth, fold_index=0, seed=0,
                  batch_size=64):
    """Full metric suite on a test split; cluster metrics use the pooled
    per-task embeddings against that task's true labels."""
    sed_truth = np.asarray(sed_truth)
    soc_truth = np.asarray(soc_truth)
    sed_pred, soc_pred, sed_emb, soc_emb = predict_batched(model, features, batch_size)
    num_sed = model.config.num_sed
    num_soc = model.config.num_soc
    report = FoldReport(
        fold_index=fold_index,
        seed=seed,
        sed_accuracy=accuracy(sed_pred, sed_truth),
        sed_macro_f1=macro_f1(sed_pred, sed_truth, num_sed),
        soc_accuracy=accuracy(soc_pred, soc_truth),
        soc_macro_f1=macro_f1(soc_pred, soc_truth, num_soc),
        joint_accuracy=joint_accuracy(sed_pred, sed_truth, soc_pred, soc_truth),
        sed_silhouette=silhouette(sed_emb, sed_truth),
        sed_intra_class_distance=intra_class_distance(sed_emb, sed_truth),
        sed_inter_class_distance=inter_class_distance(sed_emb, sed_truth),
        soc_silhouette=silhouette(soc_emb, soc_truth),
        soc_intra_class_distance=intra_class_distance(soc_emb, soc_truth),
        soc_inter_class_distance=inter_class_distance(soc_emb, soc_truth),
        sed_confusion=confusion_normalized(sed_pred, sed_truth, num_sed).tolist(),
        soc_confusion=confusion_normalized(soc_pred, soc_truth, num_soc).tolist(),
    )
    return FoldEvaluation(report, sed_pred, soc_pred, sed_emb, soc_emb)


def aggregate_reports(reports):
    """Mean and sample standard deviation (ddof=1) per metric over folds."""
    out = {}
    for name in SCALAR_METRICS:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        out[name] = {"mean": float(values.mean()), "std": std}
    return out

"""Classifier alignment from stored per-class Gaussian statistics.

After each task the per-class feature mean and covariance are recorded
once (never recomputed from raw old-task data); the classifier alone is
then fine-tuned on synthetic features sampled from those Gaussians, which
removes the bias toward recently trained classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matcore
from .errors import ValidationError

__all__ = ["ClassStats", "AlignConfig", "estimate_stats", "align_classifier"]

_ALIGN_BATCH = 64


@dataclass(frozen=True)
class ClassStats:
    """Empirical feature mean and covariance of one class."""

    class_id: int
    mu: np.ndarray
    sigma_mat: np.ndarray
    count: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        s = matcore.as_matrix(self.sigma_mat, "class covariance")
        if mu.ndim != 1 or s.shape != (mu.shape[0], mu.shape[0]):
            raise ValidationError("mean/covariance shape mismatch")
        if np.max(np.abs(s - s.T), initial=0.0) > 1e-8:
            raise ValidationError("class covariance is not symmetric within 1e-8")
        if self.count < 1:
            raise ValidationError("class stats need at least one sample")
        object.__setattr__(self, "mu", matcore._readonly(mu))
        object.__setattr__(self, "sigma_mat", matcore._readonly(s))


@dataclass(frozen=True)
class AlignConfig:
    samples_per_class: int = 256
    epochs: int = 3
    lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ValidationError("samples_per_class must be >= 1")
        if self.epochs < 0 or self.lr <= 0:
            raise ValidationError("bad alignment epochs or learning rate")


def estimate_stats(features, labels):
    """Per-class mean and covariance of a feature batch.

    features has one sample per row. Covariance uses denominator
    max(count - 1, 1), so singleton classes get a zero matrix (the
    sampling-time ridge keeps them drawable).
    """
    f = matcore.as_matrix(features, "features")
    labels = np.asarray(labels)
    if labels.shape != (f.shape[0],):
        raise ValidationError("labels do not match feature rows")
    if labels.size == 0:
        raise ValidationError("no classes to estimate")
    stats = {}
    for c in sorted(set(int(v) for v in labels)):
        rows = f[labels == c]
        mu = rows.mean(axis=0)
        centered = rows - mu
        cov = centered.T @ centered / max(rows.shape[0] - 1, 1)
        cov = 0.5 * (cov + cov.T)
        stats[c] = ClassStats(c, mu, cov, rows.shape[0])
    return stats


def align_classifier(model, stats, cfg):
    """Fine-tune only the classifier on Gaussian-sampled synthetic features.

    stats must cover every class the model knows. Backbone weights and all
    adapters are untouched; cross-entropy runs over all seen classes so
    old and new heads are rebalanced against each other.
    """
    missing = [c for c in model.class_ids if c not in stats]
    if missing:
        raise ValidationError(f"missing stats for classes {missing}")
    if cfg.epochs == 0:
        return model

    feats = []
    rows = []
    for c in model.class_ids:
        st = stats[c]
        seed = int(np.random.SeedSequence([cfg.seed, c]).generate_state(1)[0])
        feats.append(
            matcore.gaussian_sample(st.mu, st.sigma_mat, cfg.samples_per_class, seed)
        )
        rows.extend([model.row_of(c)] * cfg.samples_per_class)
    x = np.vstack(feats)
    y_rows = np.asarray(rows)

    w = model.classifier_w.copy()
    b = model.classifier_b.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    n = x.shape[0]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, _ALIGN_BATCH):
            idx = perm[start : start + _ALIGN_BATCH]
            xb = x[idx]
            logits = xb @ w.T + b
            shift = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(shift)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(idx)), y_rows[idx]] -= 1.0
            p /= len(idx)
            w -= cfg.lr * (p.T @ xb)
            b -= cfg.lr * p.sum(axis=0)
    model.classifier_w = w
    model.classifier_b = b
    return model

"""Sigmoid cross-entropy classification loss with tri-state labels.

For a logit ``x`` with ``p = sigmoid(x)``::

    l = +1  ->  -log(p)       = softplus(-x)
    l = -1  ->  -log(1 - p)   = softplus(x)
    l =  0  ->  0

Each entry is scaled by the assignment weight.  The gradient with respect
to the logit is ``w * (p - 1)`` for positives and ``w * p`` for negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assign import AssignmentMatrix


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    logits: np.ndarray

    def __post_init__(self):
        if self.logits.ndim != 2:
            raise ValueError(f"logits must be 2-D, got shape {self.logits.shape}")
        if not np.isfinite(self.logits).all():
            raise ValueError("logits must be finite")

    @classmethod
    def of(cls, logits) -> "ScoreMatrix":
        return cls(np.array(logits, dtype=np.float64, ndmin=2))

    @property
    def probabilities(self) -> np.ndarray:
        return sigmoid(self.logits)


@dataclass(frozen=True, eq=False)
class LossResult:
    total: float
    per_entry: np.ndarray
    gradient: np.ndarray

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "per_entry": self.per_entry.tolist(),
            "gradient": self.gradient.tolist(),
        }


def _labels_weights(m: AssignmentMatrix | tuple) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(m, AssignmentMatrix):
        return m.labels, m.weights
    labels, weights = m
    return np.asarray(labels), np.asarray(weights, dtype=np.float64)


def _total(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    per = np.where(labels == 1, softplus(-logits), np.where(labels == -1, softplus(logits), 0.0))
    # fixed C-order summation keeps the total reproducible
    return float(np.sum((weights * per).ravel())), per


def classification_loss(s: ScoreMatrix, m: AssignmentMatrix | tuple) -> LossResult:
    """Loss, unweighted per-entry losses and the gradient w.r.t. the logits.

    ``m`` is an :class:`AssignmentMatrix` or a ``(labels, weights)`` pair.
    """
    labels, weights = _labels_weights(m)
    if labels.shape != s.logits.shape or weights.shape != s.logits.shape:
        raise ValueError(f"shape mismatch: logits {s.logits.shape}, labels {labels.shape}")
    total, per = _total(s.logits, labels, weights)
    p = sigmoid(s.logits)
    grad = np.where(labels == 1, p - 1.0, np.where(labels == -1, p, 0.0)) * weights
    grad[labels == 0] = 0.0
    return LossResult(total, per, grad)


def gradient_check(s: ScoreMatrix, m: AssignmentMatrix | tuple, step: float = 1e-4) -> float:
    """Max relative error between the analytic gradient and central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    labels, weights = _labels_weights(m)
    analytic = classification_loss(s, (labels, weights)).gradient
    x = s.logits.copy()
    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        f_plus, _ = _total(x, labels, weights)
        x[idx] = orig - step
        f_minus, _ = _total(x, labels, weights)
        x[idx] = orig
        numeric[idx] = (f_plus - f_minus) / (2.0 * step)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    return float(rel.max()) if rel.size else 0.0

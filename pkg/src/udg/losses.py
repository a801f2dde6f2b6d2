"""Training objectives.

Value functions take posteriors (rows of a softmax), as the objectives are
written in terms of probabilities. Gradient helpers take logits and return
d(loss)/d(logits) for the same batch-mean normalisation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import softmax

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_u: float = 0.5
    lambda_a: float = 0.1

    def __post_init__(self):
        if self.lambda_u < 0 or self.lambda_a < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    l_ci: float
    l_co: float
    l_a: float
    total: float


def _safe_log(p: np.ndarray, diagnostics: dict | None) -> np.ndarray:
    low = p < PROB_FLOOR
    if low.any():
        n = int(low.sum())
        log.debug("clamped %d probabilities below %g", n, PROB_FLOOR)
        if diagnostics is not None:
            diagnostics["clamped"] = diagnostics.get("clamped", 0) + n
    return np.log(np.maximum(p, PROB_FLOOR))


def _nll(posteriors, targets, diagnostics):
    p = np.asarray(posteriors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if p.shape[0] == 0:
        return 0.0
    if targets.min() < 0 or targets.max() >= p.shape[1]:
        raise ValueError("target index out of range")
    picked = p[np.arange(p.shape[0]), targets]
    # fsum is exactly rounded, so the value does not depend on batch order
    return -math.fsum(_safe_log(picked, diagnostics)) / len(picked)


def classification_loss(posteriors, labels, diagnostics: dict | None = None) -> float:
    """Mean negative log-likelihood of the true (or pseudo) labels."""
    return _nll(posteriors, labels, diagnostics)


def entropy_oe_loss(posteriors, diagnostics: dict | None = None) -> float:
    """-(1/N)(1/C) sum_i sum_c log p_ic; minimised at uniform rows with value ln C."""
    p = np.asarray(posteriors, dtype=np.float64)
    if p.shape[0] == 0:
        return 0.0
    return -math.fsum(_safe_log(p, diagnostics).ravel()) / p.size


def auxiliary_loss(group_posteriors, group_indices, diagnostics: dict | None = None) -> float:
    return _nll(group_posteriors, group_indices, diagnostics)


def total_loss(l_ci: float, l_co: float, l_a: float, weights: LossWeights) -> LossBreakdown:
    total = l_ci + weights.lambda_u * l_co + weights.lambda_a * l_a
    return LossBreakdown(l_ci, l_co, l_a, total)


def cross_entropy_grad(logits, targets) -> np.ndarray:
    p = softmax(logits)
    n = p.shape[0]
    p[np.arange(n), np.asarray(targets)] -= 1.0
    return p / n


def entropy_oe_grad(logits) -> np.ndarray:
    p = softmax(logits)
    n, c = p.shape
    return (p - 1.0 / c) / n

"""Test-time OOD scores (MSP, ODIN, energy) and thresholded prediction.

All scores are oriented so that higher means more in-distribution.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .metrics import fpr_at_tpr, auroc
from .model import DualHeadNetwork, softmax

REJECT = -1
ODIN_TEMPERATURES = (1.0, 10.0, 100.0, 1000.0)
ODIN_EPSILONS = (0.0, 0.0005, 0.001, 0.0014, 0.002, 0.005)


class Detector(str, Enum):
    MSP = "MSP"
    ODIN = "ODIN"
    EBO = "EBO"


@dataclass(frozen=True)
class DetectorConfig:
    method: Detector = Detector.MSP
    temperature: float = 1.0
    odin_epsilon: float = 0.0
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "method", Detector(self.method))
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.odin_epsilon < 0:
            raise ValueError("odin_epsilon must be non-negative")

    @property
    def name(self) -> str:
        return self.method.value


def msp_score(net: DualHeadNetwork, x) -> np.ndarray:
    return softmax(net.class_logits(x)).max(axis=1)


def odin_perturb(net: DualHeadNetwork, x, temperature: float, epsilon: float) -> np.ndarray:
    """Step the input against the gradient of -log max softmax(logits / T)."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if epsilon == 0:
        return x
    _, logits, _ = net.forward(x)
    p = softmax(logits / temperature)
    top = p.argmax(axis=1)
    p[np.arange(len(top)), top] -= 1.0
    g = net.backward(grad_c=p / temperature)
    return x - epsilon * np.sign(g)


def odin_score(net: DualHeadNetwork, x, temperature: float = 1000.0, epsilon: float = 0.0014) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    x_t = odin_perturb(net, x, temperature, epsilon)
    return softmax(net.class_logits(x_t) / temperature).max(axis=1)


def logsumexp_score(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    m = z.max(axis=1)
    return temperature * (m + np.log(np.exp(z - m[:, None]).sum(axis=1)))


def energy_score(net: DualHeadNetwork, x, temperature: float = 1.0) -> np.ndarray:
    """Negative free energy T * log sum_c exp(f_c / T)."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return logsumexp_score(net.class_logits(x), temperature)


def score(net: DualHeadNetwork, x, cfg: DetectorConfig) -> np.ndarray:
    if cfg.method is Detector.MSP:
        return msp_score(net, x)
    if cfg.method is Detector.ODIN:
        return odin_score(net, x, cfg.temperature, cfg.odin_epsilon)
    return energy_score(net, x, cfg.temperature)


def predict(net: DualHeadNetwork, x, threshold: float, scorer=msp_score) -> np.ndarray:
    """argmax class where ``scorer(net, x) >= threshold``, else ``REJECT``."""
    s = scorer(net, x)
    pred = net.class_logits(x).argmax(axis=1)
    return np.where(s < threshold, REJECT, pred)


@dataclass
class ScoreTable:
    score: np.ndarray
    is_id: np.ndarray
    true_class: np.ndarray  # -1 where unknown
    pred_class: np.ndarray
    sample_id: np.ndarray | None = None

    def __post_init__(self):
        if self.sample_id is None:
            self.sample_id = np.arange(len(self.score))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "score", "is_id", "true_class", "pred_class"])
            for row in zip(self.sample_id, self.score, self.is_id, self.true_class, self.pred_class):
                w.writerow([int(row[0]), f"{row[1]:.9g}", int(row[2]), int(row[3]), int(row[4])])


def build_score_table(net: DualHeadNetwork, x, is_id, true_class, cfg: DetectorConfig,
                      sample_id=None) -> ScoreTable:
    return ScoreTable(
        score=score(net, x, cfg),
        is_id=np.asarray(is_id, dtype=bool),
        true_class=np.asarray(true_class, dtype=np.int64),
        pred_class=net.class_logits(x).argmax(axis=1),
        sample_id=sample_id,
    )


def odin_sweep(net: DualHeadNetwork, x_val, is_id_val,
               temperatures=ODIN_TEMPERATURES, epsilons=ODIN_EPSILONS) -> DetectorConfig:
    """Pick (T, eps) with the lowest validation FPR95; ties go to higher AUROC, then grid order."""
    best, best_key = None, None
    for t in temperatures:
        for eps in epsilons:
            s = odin_score(net, x_val, t, eps)
            key = (fpr_at_tpr(s, is_id_val), -auroc(s, is_id_val))
            if best_key is None or key < best_key:
                best, best_key = DetectorConfig(Detector.ODIN, t, eps), key
    return best

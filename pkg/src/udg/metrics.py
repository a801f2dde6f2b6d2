"""OOD evaluation metrics.

Conventions shared by every function here:

* higher score = more in-distribution; a sample is predicted positive
  (ID) when ``score >= threshold``;
* thresholds range over the distinct observed scores, so tied samples
  always move together;
* precision-recall area is the right-continuous step sum
  ``sum_j (R_j - R_{j-1}) * P_j`` with no interpolation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CCR_LEVELS = (1e-4, 1e-3, 1e-2, 1e-1)
REPORT_KEYS = ("fpr95", "auroc", "aupr_in", "aupr_out",
               "ccr_1e4", "ccr_1e3", "ccr_1e2", "ccr_1e1", "accuracy")


class EvaluationError(ValueError):
    pass


def _split(scores, is_id):
    scores = np.asarray(scores, dtype=np.float64)
    is_id = np.asarray(is_id, dtype=bool)
    if scores.shape != is_id.shape:
        raise EvaluationError("scores and labels differ in length")
    if not is_id.any() or is_id.all():
        raise EvaluationError("need at least one ID and one OOD sample")
    return scores, is_id


def _threshold_counts(scores, positive):
    """Distinct thresholds in descending order with cumulative TP/FP counts at each."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    last = np.r_[s[1:] != s[:-1], True]
    return s[last], tp[last], fp[last]


def fpr_at_tpr(scores, is_id, tpr_level: float = 0.95) -> float:
    scores, is_id = _split(scores, is_id)
    if not 0.0 < tpr_level <= 1.0:
        raise ValueError("tpr_level must be in (0, 1]")
    _, tp, fp = _threshold_counts(scores, is_id)
    tpr = tp / is_id.sum()
    first = int(np.argmax(tpr >= tpr_level))
    return float(fp[first] / (~is_id).sum())


def auroc(scores, is_id) -> float:
    """Mann-Whitney form: P(s_id > s_ood) + 0.5 * P(s_id == s_ood)."""
    scores, is_id = _split(scores, is_id)
    ood = np.sort(scores[~is_id])
    sid = scores[is_id]
    below = np.searchsorted(ood, sid, side="left")
    tied = np.searchsorted(ood, sid, side="right") - below
    return float((below.sum() + 0.5 * tied.sum()) / (sid.size * ood.size))


def aupr(scores, is_id, positive: str = "ID") -> float:
    scores = np.asarray(scores, dtype=np.float64)
    is_id = np.asarray(is_id, dtype=bool)
    if positive == "ID":
        s, pos = scores, is_id
    elif positive == "OOD":
        s, pos = -scores, ~is_id
    else:
        raise ValueError("positive must be 'ID' or 'OOD'")
    if not pos.any():
        raise EvaluationError("positive class is empty")
    _, tp, fp = _threshold_counts(s, pos)
    precision = tp / (tp + fp)
    gain = np.diff(np.r_[0, tp]) / pos.sum()
    return float((gain * precision).sum())


def ccr_at_fpr(scores, is_id, pred_class, true_class, n: float,
               diagnostics: dict | None = None) -> float:
    """Correct classification rate at the operating point where FPR reaches ``n``.

    Candidate thresholds are the observed OOD scores; the most permissive one
    whose FPR is still <= n is used. If even the highest OOD score gives
    FPR > n, the threshold sits just above it (FPR = 0) and the granularity
    is reported through ``diagnostics``.
    """
    scores, is_id = _split(scores, is_id)
    pred_class = np.asarray(pred_class)
    true_class = np.asarray(true_class)
    thr, _, fp = _threshold_counts(scores[~is_id], np.zeros((~is_id).sum(), dtype=bool))
    fpr = fp / (~is_id).sum()
    ok = np.flatnonzero(fpr <= n)
    sid = scores[is_id]
    if ok.size:
        kept = sid >= thr[ok[-1]]
    else:
        kept = sid > thr[0]
        log.debug("FPR level %g below resolution 1/%d", n, (~is_id).sum())
        if diagnostics is not None:
            diagnostics.setdefault("ccr_granularity", []).append(n)
    correct = pred_class[is_id] == true_class[is_id]
    return float((kept & correct).sum() / is_id.sum())


def accuracy(is_id, pred_class, true_class) -> float:
    is_id = np.asarray(is_id, dtype=bool)
    if not is_id.any():
        raise EvaluationError("no ID samples")
    return float((np.asarray(pred_class)[is_id] == np.asarray(true_class)[is_id]).mean())


@dataclass
class MetricsReport:
    fpr95: float
    auroc: float
    aupr_in: float
    aupr_out: float
    ccr_at_fpr: dict = field(default_factory=dict)
    accuracy: float = 0.0

    def to_dict(self) -> dict:
        out = {"fpr95": self.fpr95, "auroc": self.auroc,
               "aupr_in": self.aupr_in, "aupr_out": self.aupr_out}
        for level, key in zip(CCR_LEVELS, REPORT_KEYS[4:8]):
            out[key] = self.ccr_at_fpr[level]
        out["accuracy"] = self.accuracy
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        ccr = {lvl: d[k] for lvl, k in zip(CCR_LEVELS, REPORT_KEYS[4:8])}
        return cls(d["fpr95"], d["auroc"], d["aupr_in"], d["aupr_out"], ccr, d["accuracy"])


def compute_metrics(scores, is_id, pred_class, true_class,
                    diagnostics: dict | None = None) -> MetricsReport:
    return MetricsReport(
        fpr95=fpr_at_tpr(scores, is_id, 0.95),
        auroc=auroc(scores, is_id),
        aupr_in=aupr(scores, is_id, "ID"),
        aupr_out=aupr(scores, is_id, "OOD"),
        ccr_at_fpr={n: ccr_at_fpr(scores, is_id, pred_class, true_class, n, diagnostics)
                    for n in CCR_LEVELS},
        accuracy=accuracy(is_id, pred_class, true_class),
    )


def mean_report(reports) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise EvaluationError("nothing to average")
    rows = np.array([[r.to_dict()[k] for k in REPORT_KEYS] for r in reports])
    return MetricsReport.from_dict(dict(zip(REPORT_KEYS, rows.mean(axis=0).tolist())))


"""Joint training on a labeled set and an ID/OOD-mixed unlabeled set.

Each epoch: features for all of D -> k-means groups -> filtering of the
unlabeled pool -> minibatch SGD on
    CE(D_L^t) + lambda_u * OE-entropy(D_U^t) + lambda_a * CE_groups(D).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import grouping
from .data import LabeledSet, TestSet, UnlabeledSet, cycle_batches, make_batches
from .detection import DetectorConfig, ScoreTable, build_score_table
from .grouping import FilterConfig, FilterStrategy, UNLABELED
from .losses import (LossWeights, auxiliary_loss, classification_loss, cross_entropy_grad,
                     entropy_oe_grad, entropy_oe_loss, total_loss)
from .metrics import MetricsReport, compute_metrics, mean_report
from .model import DualHeadNetwork, l2_normalize, softmax
from .nn import SGD, NumericalError, cosine_lr, linear_forward

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, msg, logs):
        super().__init__(msg)
        self.logs = logs


@dataclass
class TrainConfig:
    epochs: int = 100
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_labeled: int = 128
    batch_unlabeled: int = 256
    lambda_u: float = 0.5
    lambda_a: float = 0.1
    k_groups: int = 1000
    tau: float = 0.8
    filter: FilterStrategy = FilterStrategy.UDG
    seed: int = 0
    hidden: tuple = (64, 64)
    use_l_ci: bool = True
    use_l_co: bool = True
    use_l_a: bool = True
    use_idf: bool = True
    filter_start_epoch: int = 1
    kmeans_max_iters: int = 100

    def __post_init__(self):
        self.filter = FilterStrategy(self.filter)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.filter_start_epoch < 1:
            raise ValueError("filter_start_epoch must be >= 1")
        LossWeights(self.lambda_u, self.lambda_a)
        self.filter_config  # validates tau / k_groups

    @property
    def filter_config(self) -> FilterConfig:
        strategy = self.filter if self.use_idf else FilterStrategy.OFF
        return FilterConfig(strategy, self.tau, self.k_groups)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_u if self.use_l_co else 0.0,
                           self.lambda_a if self.use_l_a else 0.0)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    l_ci: float
    l_co: float
    l_a: float
    total: float
    n_labeled: int
    n_unlabeled: int
    n_filtered: int
    train_acc: float
    grouping_sse: float | None = None
    idf_precision: float | None = None
    idf_recall: float | None = None
    clamped: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _steps(n_labeled, batch):
    return max(1, math.ceil(n_labeled / batch))


def train(config: TrainConfig, labeled: LabeledSet, unlabeled: UnlabeledSet, *,
          n_classes: int | None = None, log_fh=None, grouping_dump=None, on_epoch=None):
    """Run the full loop. Returns ``(net, logs)``.

    ``log_fh`` receives one JSON line per epoch; ``grouping_dump`` receives
    ``epoch,sample_id,group,pseudo_label`` lines; ``on_epoch(net, log)`` is
    called after every epoch (checkpointing hook).
    """
    cfg = config
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise ValueError("both training sets must be non-empty")
    n_classes = n_classes or int(labeled.labels.max()) + 1
    x_all = np.vstack([labeled.samples, unlabeled.samples])
    n_l, n = len(labeled), len(x_all)
    original = np.concatenate([labeled.labels, np.full(len(unlabeled), UNLABELED)])
    truth = None
    if unlabeled.id_flags is not None:
        truth = np.concatenate([np.ones(n_l, dtype=bool), np.asarray(unlabeled.id_flags, dtype=bool)])

    net = DualHeadNetwork.init(x_all.shape[1], list(cfg.hidden), n_classes, cfg.k_groups,
                               np.random.default_rng([cfg.seed, 1]))
    opt = SGD(cfg.lr0, cfg.momentum, cfg.weight_decay)
    weights = cfg.weights
    fcfg = cfg.filter_config
    need_groups = cfg.use_l_a or fcfg.strategy is FilterStrategy.UDG
    if need_groups and cfg.k_groups > n:
        raise ValueError(f"k_groups={cfg.k_groups} exceeds training set size {n}")

    expanded = original.copy()
    assignments = None
    logs = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr0)
        feats = net.extract_features(x_all)
        logits_c = linear_forward(feats, net.head_c)
        train_acc = float((logits_c[:n_l].argmax(1) == labeled.labels).mean())

        sse = None
        if need_groups:
            unit = l2_normalize(feats)
            centroids, assignments = grouping.kmeans(unit, cfg.k_groups,
                                                     np.random.default_rng([cfg.seed, 2, epoch]),
                                                     cfg.kmeans_max_iters)
            sse = grouping.sse(unit, centroids, assignments)

        if fcfg.strategy is FilterStrategy.OFF or epoch < cfg.filter_start_epoch:
            expanded = original.copy()
        elif fcfg.strategy is FilterStrategy.UDG:
            # purity against last epoch's expanded set; union against the original
            purity = grouping.group_purity(assignments, cfg.k_groups, expanded, n_classes)
            expanded = grouping.idf_filter(assignments, purity, original, cfg.tau)
        else:
            post = softmax(logits_c[n_l:])
            expanded = grouping.apply_posterior_filter(fcfg.strategy, post, np.arange(n_l, n),
                                                       original, cfg.tau)

        lab_idx = np.flatnonzero(expanded != UNLABELED)
        unl_idx = np.flatnonzero(expanded == UNLABELED)
        precision = recall = None
        if truth is not None and fcfg.strategy is not FilterStrategy.OFF:
            precision, recall = grouping.filter_audit(original, expanded, truth)
        if grouping_dump is not None and assignments is not None:
            grouping.write_grouping_dump(grouping_dump, epoch, assignments, expanded)

        use_unl = (cfg.use_l_co or cfg.use_l_a) and len(unl_idx) > 0
        unl_iter = cycle_batches(unl_idx, cfg.batch_unlabeled, cfg.seed, epoch, 1) if use_unl else None
        lab_iter = make_batches(lab_idx, cfg.batch_labeled, cfg.seed, epoch, 0)
        diag = {}
        sums = np.zeros(4)
        steps = _steps(len(lab_idx), cfg.batch_labeled)
        for _ in range(steps):
            lb = next(lab_iter)
            ub = next(unl_iter) if unl_iter is not None else lb[:0]
            idx = np.concatenate([lb, ub])
            _, zc, za = net.forward(x_all[idx])
            nl = len(lb)
            pc = softmax(zc)
            grad_c = np.zeros_like(zc)
            grad_a = None
            l_ci = l_co = l_a = 0.0
            if cfg.use_l_ci:
                l_ci = classification_loss(pc[:nl], expanded[lb], diag)
                grad_c[:nl] = cross_entropy_grad(zc[:nl], expanded[lb])
            if cfg.use_l_co and len(ub):
                l_co = entropy_oe_loss(pc[nl:], diag)
                grad_c[nl:] = weights.lambda_u * entropy_oe_grad(zc[nl:])
            if cfg.use_l_a:
                l_a = auxiliary_loss(softmax(za), assignments[idx], diag)
                grad_a = weights.lambda_a * cross_entropy_grad(za, assignments[idx])
            parts = total_loss(l_ci, l_co, l_a, weights)
            if not math.isfinite(parts.total):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", logs)
            sums += (parts.l_ci, parts.l_co, parts.l_a, parts.total)
            net.backward(grad_c, grad_a)
            try:
                opt.step(net.params())
            except NumericalError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}", logs) from exc

        means = sums / steps
        entry = EpochLog(epoch, opt.lr, *map(float, means), n_labeled=len(lab_idx),
                         n_unlabeled=len(unl_idx), n_filtered=len(lab_idx) - n_l,
                         train_acc=train_acc, grouping_sse=sse, idf_precision=precision,
                         idf_recall=recall, clamped=int(diag.get("clamped", 0)))
        logs.append(entry)
        log.info("epoch %d lr %.4f loss %.4f |D_L^t| %d acc %.3f", epoch, opt.lr,
                 entry.total, entry.n_labeled, train_acc)
        if log_fh is not None:
            log_fh.write(entry.to_json() + "\n")
        if on_epoch is not None:
            on_epoch(net, entry)
    return net, logs


def score_tables(net: DualHeadNetwork, test_sets, detectors) -> dict:
    """{detector name: {dataset name: ScoreTable}}."""
    if isinstance(test_sets, TestSet):
        test_sets = [test_sets]
    out = {}
    for det in detectors:
        out[det.name] = {ts.name: build_score_table(net, ts.samples, ts.id_flags, ts.true_class,
                                                    det, ts.sample_ids)
                         for ts in test_sets}
    return out


def reports_from_tables(tables: dict) -> dict:
    """ScoreTables -> {detector: {dataset: MetricsReport, ..., "mean": MetricsReport}}."""
    out = {}
    for det, per_ds in tables.items():
        reps = {name: compute_metrics(t.score, t.is_id, t.pred_class, t.true_class)
                for name, t in per_ds.items()}
        reps["mean"] = mean_report(reps.values())
        out[det] = reps
    return out


def evaluate(net: DualHeadNetwork, test_sets, detectors: list[DetectorConfig]) -> dict:
    return reports_from_tables(score_tables(net, test_sets, detectors))


def oracle_tables(test_sets) -> dict:
    """Ground-truth flags as scores and true classes as predictions."""
    if isinstance(test_sets, TestSet):
        test_sets = [test_sets]
    per = {ts.name: ScoreTable(ts.id_flags.astype(np.float64), ts.id_flags, ts.true_class,
                               np.where(ts.true_class >= 0, ts.true_class, 0), ts.sample_ids)
           for ts in test_sets}
    return {"ORACLE": per}


def report_json(reports: dict) -> str:
    payload = {det: {name: r.to_dict() for name, r in per.items()} for det, per in reports.items()}
    return json.dumps(payload, indent=2) + "\n"


"""Per-epoch grouping of training features and in-distribution filtering.

Sample ids are row indices into the full training set D (labeled rows
first, then unlabeled). Label vectors use -1 for "no label".
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import sparse

UNLABELED = -1


class FilterStrategy(str, Enum):
    UDG = "UDG"
    THRESH = "THRESH"
    SORT = "SORT"
    OFF = "OFF"


@dataclass(frozen=True)
class FilterConfig:
    strategy: FilterStrategy = FilterStrategy.UDG
    tau: float = 0.8
    k_groups: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "strategy", FilterStrategy(self.strategy))
        _check_tau(self.tau)
        if self.k_groups < 1:
            raise ValueError("k_groups must be >= 1")


@dataclass
class GroupingState:
    epoch: int
    centroids: np.ndarray
    assignments: np.ndarray
    purity: np.ndarray
    expanded_labels: np.ndarray
    sse_history: list = field(default_factory=list)

    @property
    def expanded_labeled(self) -> np.ndarray:
        return np.flatnonzero(self.expanded_labels != UNLABELED)

    @property
    def remaining_unlabeled(self) -> np.ndarray:
        return np.flatnonzero(self.expanded_labels == UNLABELED)


def _check_tau(tau):
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")


def _nearest(x, centroids):
    # ||x||^2 is constant per row and does not affect the argmin
    d = x @ (-2.0 * centroids).T
    d += (centroids * centroids).sum(1)
    return np.argmin(d, axis=1)


def sse(x, centroids, assignments) -> float:
    diff = x - centroids[assignments]
    return float((diff * diff).sum())


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    sq = (x * x).sum(1)

    def dist_to(i):
        return np.maximum(sq - 2.0 * (x @ x[i]) + sq[i], 0.0)

    idx = [int(rng.integers(n))]
    closest = dist_to(idx[0])
    closest[idx[0]] = 0.0
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point coincides with a chosen centre
            free = np.setdiff1d(np.arange(n), idx)
            nxt = int(rng.choice(free))
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        closest = np.minimum(closest, dist_to(nxt))
        closest[idx] = 0.0
    return x[idx].copy()


def _update_centroids(x, assignments, k):
    counts = np.bincount(assignments, minlength=k)
    onehot = sparse.csr_matrix((np.ones(len(assignments)), (assignments, np.arange(len(assignments)))),
                               shape=(k, len(assignments)))
    sums = onehot @ x
    centroids = sums / np.maximum(counts, 1)[:, None]
    assignments = assignments.copy()
    for empty in np.flatnonzero(counts == 0):
        # re-seed from the point farthest from the centroid of the largest cluster
        big = int(np.argmax(counts))
        members = np.flatnonzero(assignments == big)
        far = members[np.argmax(((x[members] - centroids[big]) ** 2).sum(1))]
        assignments[far] = empty
        counts[big] -= 1
        counts[empty] = 1
        centroids[empty] = x[far]
        centroids[big] = x[assignments == big].mean(0)
    return centroids, assignments


def kmeans(features, k: int, seed=0, max_iters: int = 100, history: list | None = None):
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments stop changing or after ``max_iters`` rounds.
    Returns ``(centroids, assignments)``; the assignments are always nearest
    to the returned centroids. If ``history`` is given, the SSE after every
    assignment step is appended to it.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    centroids = kmeans_pp_init(x, k, rng)
    assignments = None
    for _ in range(max_iters):
        new = _nearest(x, centroids)
        if history is not None:
            history.append(sse(x, centroids, new))
        if assignments is not None and np.array_equal(new, assignments):
            return centroids, new
        assignments = new
        centroids, assignments = _update_centroids(x, assignments, k)
    assignments = _nearest(x, centroids)
    if history is not None:
        history.append(sse(x, centroids, assignments))
    return centroids, assignments


def group_membership(assignments, k: int) -> list[np.ndarray]:
    assignments = np.asarray(assignments)
    order = np.argsort(assignments, kind="stable")
    bounds = np.searchsorted(assignments[order], np.arange(k + 1))
    return [order[bounds[g]:bounds[g + 1]] for g in range(k)]


def group_purity(assignments, k: int, reference_labels, n_classes: int) -> np.ndarray:
    """gamma[k, c] = |D_k with reference label c| / |D_k| (all members in the denominator)."""
    assignments = np.asarray(assignments, dtype=np.int64)
    ref = np.asarray(reference_labels, dtype=np.int64)
    sizes = np.bincount(assignments, minlength=k).astype(np.float64)
    has = ref != UNLABELED
    counts = np.bincount(assignments[has] * n_classes + ref[has],
                         minlength=k * n_classes).reshape(k, n_classes)
    return np.divide(counts, sizes[:, None], out=np.zeros((k, n_classes)), where=sizes[:, None] > 0)


def idf_filter(assignments, purity: np.ndarray, original_labels, tau: float) -> np.ndarray:
    """Return the expanded label vector D_L^(t).

    Unlabeled members of any group whose best class purity is strictly above
    ``tau`` get that class as pseudo-label. The union is always taken with
    the original labels, so earlier pseudo-labels are never carried over.
    """
    _check_tau(tau)
    original = np.asarray(original_labels, dtype=np.int64)
    assignments = np.asarray(assignments, dtype=np.int64)
    best = np.argmax(purity, axis=1)
    passes = purity[np.arange(purity.shape[0]), best] > tau
    out = original.copy()
    take = (original == UNLABELED) & passes[assignments]
    out[take] = best[assignments[take]]
    return out


def thresh_filter(class_posteriors, tau: float):
    """Rows whose max softmax exceeds ``tau``: ``(row_indices, pseudo_labels)``."""
    p = np.asarray(class_posteriors, dtype=np.float64)
    conf = p.max(axis=1)
    rows = np.flatnonzero(conf > tau)
    return rows, p[rows].argmax(axis=1)


def sort_filter(class_posteriors, tau: float):
    """Top floor((1 - tau) * N) rows by max softmax, ties to the lower row index."""
    _check_tau(tau)
    p = np.asarray(class_posteriors, dtype=np.float64)
    n = p.shape[0]
    # the epsilon keeps e.g. (1 - 0.8) * 10 from flooring to 1
    m = min(n, int(math.floor((1.0 - tau) * n + 1e-9)))
    conf = p.max(axis=1)
    order = np.lexsort((np.arange(n), -conf))
    rows = np.sort(order[:m])
    return rows, p[rows].argmax(axis=1)


def apply_posterior_filter(strategy, posteriors_unlabeled, unlabeled_ids, original_labels, tau):
    """Expanded label vector for the THRESH / SORT alternatives."""
    fn = {FilterStrategy.THRESH: thresh_filter, FilterStrategy.SORT: sort_filter}[FilterStrategy(strategy)]
    rows, labels = fn(posteriors_unlabeled, tau)
    out = np.asarray(original_labels, dtype=np.int64).copy()
    out[np.asarray(unlabeled_ids)[rows]] = labels
    return out


def filter_audit(original_labels, expanded_labels, is_id) -> tuple[float, float]:
    """Precision/recall of the pseudo-labeled set against ground-truth ID flags.

    ``is_id`` covers all of D. Precision is 1.0 when nothing was filtered;
    recall is 1.0 when the unlabeled pool holds no ID samples.
    """
    original = np.asarray(original_labels)
    unl = original == UNLABELED
    picked = unl & (np.asarray(expanded_labels) != UNLABELED)
    truth = unl & np.asarray(is_id, dtype=bool)
    tp = int((picked & truth).sum())
    precision = tp / picked.sum() if picked.any() else 1.0
    recall = tp / truth.sum() if truth.any() else 1.0
    return float(precision), float(recall)


def write_grouping_dump(fh, epoch: int, assignments, expanded_labels) -> None:
    for i, (g, y) in enumerate(zip(assignments, expanded_labels)):
        fh.write(f"{epoch},{i},{int(g)},{int(y)}\n")

"""Datasets: synthetic ID/OOD mixtures, CIFAR binary files, split manifests, batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
NO_LABEL_BYTE = 255
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


class FormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class LabeledSet:
    samples: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.samples))
        if len(self.labels) != len(self.samples):
            raise ValueError("one label per sample required")

    def __len__(self):
        return len(self.samples)


@dataclass
class UnlabeledSet:
    samples: np.ndarray
    id_flags: np.ndarray | None = None  # ground truth, audits only
    true_class: np.ndarray | None = None
    sample_ids: np.ndarray = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.samples))

    def __len__(self):
        return len(self.samples)


@dataclass
class TestSet:
    __test__ = False  # not a pytest class

    name: str
    samples: np.ndarray
    id_flags: np.ndarray
    true_class: np.ndarray  # -1 for OOD or unknown
    sample_ids: np.ndarray = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.id_flags = np.asarray(self.id_flags, dtype=bool)
        self.true_class = np.asarray(self.true_class, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.samples))

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int = 16
    n_id_classes: int = 5
    n_ood_clusters: int = 5
    samples_per_cluster: int = 500
    cluster_separation: float = 4.0
    noise_sigma: float = 1.0
    unlabeled_id_fraction: float = 0.3
    seed: int = 0
    holdout_ood_clusters: int = 0  # OOD clusters seen only at test time
    test_per_cluster: int = 100

    def validate(self):
        if self.n_id_classes < 1 or self.n_ood_clusters < 1:
            raise ValueError("need at least one ID class and one OOD cluster")
        if self.dim < 1 or self.samples_per_cluster < 1 or self.test_per_cluster < 1:
            raise ValueError("dim and sample counts must be positive")
        if not self.cluster_separation > 0 or self.noise_sigma < 0:
            raise ValueError("separation must be > 0 and sigma >= 0")
        if not 0.0 <= self.unlabeled_id_fraction < 1.0:
            raise ValueError("unlabeled_id_fraction must be in [0, 1)")
        if not 0 <= self.holdout_ood_clusters < self.n_ood_clusters:
            raise ValueError("holdout_ood_clusters must leave at least one OOD cluster in D_U")


def cluster_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_id_classes + spec.n_ood_clusters
    g = rng.standard_normal((spec.dim, max(n, 1)))
    if spec.dim >= n:
        dirs = np.linalg.qr(g)[0][:, :n].T
    else:
        dirs = (g / np.linalg.norm(g, axis=0)).T
    return spec.cluster_separation * dirs


def _even_split(total, parts):
    base = np.full(parts, total // parts)
    base[: total % parts] += 1
    return base


def generate_synthetic(spec: SyntheticSpec):
    """Gaussian ID classes and OOD clusters at orthogonal centres.

    ID classes feed D_L, the ID share of D_U and T^I. OOD clusters feed D_U
    (except the held-out ones) and T^O. ``unlabeled_id_fraction`` is the
    fraction of D_U that is ID.
    """
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x5EED])
    centers = cluster_centers(spec, rng)
    n_id, spc = spec.n_id_classes, spec.samples_per_cluster

    def draw(c, n):
        return centers[c] + spec.noise_sigma * rng.standard_normal((n, spec.dim))

    lab_x = np.concatenate([draw(c, spc) for c in range(n_id)])
    lab_y = np.repeat(np.arange(n_id), spc)

    seen_ood = range(n_id, n_id + spec.n_ood_clusters - spec.holdout_ood_clusters)
    n_uood = spc * len(seen_ood)
    f = spec.unlabeled_id_fraction
    n_uid = int(round(f / (1.0 - f) * n_uood))
    per_class = _even_split(n_uid, n_id)
    u_parts = [draw(c, m) for c, m in enumerate(per_class)] + [draw(c, spc) for c in seen_ood]
    unl_x = np.concatenate(u_parts)
    unl_cls = np.concatenate([np.repeat(np.arange(n_id), per_class), np.full(n_uood, -1)])
    unl_id = unl_cls >= 0

    t = spec.test_per_cluster
    n_all = n_id + spec.n_ood_clusters
    test_x = np.concatenate([draw(c, t) for c in range(n_all)])
    test_cls = np.concatenate([np.repeat(np.arange(n_id), t), np.full(t * spec.n_ood_clusters, -1)])

    n_l, n_u = len(lab_x), len(unl_x)
    labeled = LabeledSet(lab_x, lab_y, np.arange(n_l))
    unlabeled = UnlabeledSet(unl_x, unl_id, unl_cls, np.arange(n_l, n_l + n_u))
    test = TestSet("synthetic", test_x, test_cls >= 0, test_cls,
                   np.arange(n_l + n_u, n_l + n_u + len(test_x)))
    return labeled, unlabeled, test


# --- label-byte + payload record files ------------------------------------

def read_records(path, payload_bytes: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    rec = payload_bytes + 1
    if len(raw) % rec:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].copy()
    payload = np.ascontiguousarray(arr[:, 1:]).view(dtype).copy()
    return labels, payload


def write_records(path, labels, payload) -> None:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    payload = np.ascontiguousarray(payload)
    body = payload.view(np.uint8).reshape(len(labels), -1)
    Path(path).write_bytes(np.hstack([labels, body]).tobytes())


def read_cifar_raw(path) -> tuple[np.ndarray, np.ndarray]:
    labels, pixels = read_records(path, CIFAR_PIXELS, np.uint8)
    if labels.size and labels.max() > 9:
        bad = np.flatnonzero(labels > 9)[:5].tolist()
        raise FormatError(f"{path}: label byte > 9 in records {bad}")
    return labels.astype(np.int64), pixels


def write_cifar_binary(path, labels, pixels) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    write_records(path, labels, pixels)


def normalize_pixels(pixels, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> np.ndarray:
    """uint8 (N, 3072) in R/G/B plane order -> per-channel standardised float64."""
    x = np.asarray(pixels, dtype=np.float64).reshape(-1, 3, 1024) / 255.0
    x = (x - np.asarray(mean)[None, :, None]) / np.asarray(std)[None, :, None]
    return x.reshape(-1, CIFAR_PIXELS)


def read_cifar_binary(path, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> LabeledSet:
    labels, pixels = read_cifar_raw(path)
    return LabeledSet(normalize_pixels(pixels, mean, std), labels)


def write_float_records(path, samples, labels=None) -> None:
    """Synthetic sets in the same label-byte layout, payload = little-endian f64."""
    samples = np.asarray(samples, dtype="<f8")
    if labels is None:
        labels = np.full(len(samples), NO_LABEL_BYTE)
    labels = np.where(np.asarray(labels) < 0, NO_LABEL_BYTE, labels)
    write_records(path, labels, samples)


def read_float_records(path, dim: int) -> tuple[np.ndarray, np.ndarray]:
    labels, x = read_records(path, 8 * dim, "<f8")
    labels = labels.astype(np.int64)
    labels[labels == NO_LABEL_BYTE] = -1
    return labels, x.astype(np.float64)


def write_ground_truth(path, sample_ids, is_id) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "is_id"])
        for i, flag in zip(sample_ids, is_id):
            w.writerow([int(i), int(bool(flag))])


def read_ground_truth(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([int(r["sample_id"]) for r in rows], dtype=np.int64),
            np.array([r["is_id"] == "1" for r in rows], dtype=bool))


# --- split manifests --------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    dataset: str
    index: int
    is_id: bool
    label: int | None = None


def parse_manifest(lines) -> list[ManifestEntry]:
    """``<dataset>/<index> <ID|OOD> [class]`` per line; ``#`` starts a comment."""
    if isinstance(lines, (str, Path)) and Path(lines).exists():
        lines = Path(lines).read_text(encoding="utf-8").splitlines()
    elif isinstance(lines, str):
        lines = lines.splitlines()
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            ref, flag = parts[0], parts[1].upper()
            name, idx = ref.rsplit("/", 1)
            if flag not in ("ID", "OOD") or len(parts) > 3:
                raise ValueError
            label = int(parts[2]) if len(parts) == 3 else None
            out.append(ManifestEntry(name, int(idx), flag == "ID", label))
        except (ValueError, IndexError):
            raise ManifestError(f"manifest line {lineno} is malformed: {line!r}") from None
    return out


def apply_split_manifest(test_sets: dict, manifest) -> dict:
    """Override per-sample ID/OOD flags (and class labels, when given)."""
    entries = manifest if manifest and isinstance(manifest[0], ManifestEntry) else parse_manifest(manifest or [])
    unknown = [f"{e.dataset}/{e.index}" for e in entries
               if e.dataset not in test_sets or not 0 <= e.index < len(test_sets[e.dataset])]
    if unknown:
        raise ManifestError(f"manifest references unknown samples: {', '.join(unknown[:20])}"
                            + (f" (+{len(unknown) - 20} more)" if len(unknown) > 20 else ""))
    out = {}
    for name, ts in test_sets.items():
        flags = ts.id_flags.copy()
        cls = ts.true_class.copy()
        for e in entries:
            if e.dataset != name:
                continue
            flags[e.index] = e.is_id
            if e.label is not None:
                cls[e.index] = e.label
            elif not e.is_id:
                cls[e.index] = -1
        out[name] = replace(ts, id_flags=flags, true_class=cls)
    return out


# --- batching -----------------------------------------------------------------

def make_batches(indices, batch_size: int, seed: int, epoch: int, stream: int = 0):
    """Yield shuffled index batches; the final short batch is kept.

    The permutation depends only on (seed, stream, epoch), so the labeled and
    unlabeled loaders (different ``stream``) iterate independently.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = np.arange(indices) if np.isscalar(indices) else np.asarray(indices)
    perm = idx[np.random.default_rng([seed, stream, epoch]).permutation(len(idx))]
    for start in range(0, len(perm), batch_size):
        yield perm[start:start + batch_size]


def cycle_batches(indices, batch_size: int, seed: int, epoch: int, stream: int):
    """Endless loader: reshuffles after each pass over ``indices``."""
    n = indices if np.isscalar(indices) else len(indices)
    if n == 0:
        return
    rnd = 0
    while True:
        yield from make_batches(indices, batch_size, seed, epoch * 1_000_003 + rnd, stream)
        rnd += 1

"""Encoder with a classification head and an auxiliary grouping head."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import MLP, Linear, ShapeError, StateError, linear_forward

MAGIC = b"UDG1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, eps)


class DualHeadNetwork:
    """``encoder`` -> features -> (``head_c``: class logits, ``head_a``: group logits).

    An empty hidden-width list gives an identity encoder, i.e. two linear
    models on the raw input.
    """

    def __init__(self, encoder: MLP, head_c: Linear, head_a: Linear, input_dim: int):
        feat_dim = encoder.out_dim if encoder.layers else input_dim
        if encoder.layers and encoder.in_dim != input_dim:
            raise ShapeError("encoder input width does not match input_dim")
        if head_c.in_dim != feat_dim or head_a.in_dim != feat_dim:
            raise ShapeError("heads must consume the encoder feature dimension")
        self.encoder = encoder
        self.head_c = head_c
        self.head_a = head_a
        self.input_dim = input_dim
        self._feats = None

    @classmethod
    def init(cls, input_dim: int, hidden: list[int], n_classes: int, k_groups: int,
             rng: np.random.Generator) -> "DualHeadNetwork":
        encoder = MLP.init([input_dim, *hidden], rng)
        feat_dim = hidden[-1] if hidden else input_dim
        head_c = Linear.init(feat_dim, n_classes, rng)
        head_a = Linear.init(feat_dim, k_groups, rng)
        return cls(encoder, head_c, head_a, input_dim)

    @property
    def feat_dim(self) -> int:
        return self.head_c.in_dim

    @property
    def n_classes(self) -> int:
        return self.head_c.out_dim

    @property
    def k_groups(self) -> int:
        return self.head_a.out_dim

    @property
    def hidden(self) -> list[int]:
        return [layer.out_dim for layer in self.encoder.layers]

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"batch has shape {x.shape}, network expects {self.input_dim} columns")
        return x

    def forward(self, x):
        """Training-mode pass; caches state for ``backward``."""
        x = self._check(x)
        feats = self.encoder.forward(x, cache=True) if self.encoder.layers else x
        self._feats = feats
        return feats, linear_forward(feats, self.head_c), linear_forward(feats, self.head_a)

    def backward(self, grad_c=None, grad_a=None) -> np.ndarray:
        """Populate every parameter gradient; return d(loss)/d(input)."""
        if self._feats is None:
            raise StateError("backward called before forward")
        feats = self._feats
        g_feat = np.zeros_like(feats)
        for head, g in ((self.head_c, grad_c), (self.head_a, grad_a)):
            if g is None:
                g = np.zeros((feats.shape[0], head.out_dim))
            head.grad_weight[...] = g.T @ feats
            head.grad_bias[...] = g.sum(axis=0)
            g_feat += g @ head.weight
        if self.encoder.layers:
            return self.encoder.backward(g_feat)
        return g_feat

    def extract_features(self, x) -> np.ndarray:
        x = self._check(x)
        return self.encoder.forward(x, cache=False) if self.encoder.layers else x.copy()

    def class_logits(self, x) -> np.ndarray:
        return linear_forward(self.extract_features(x), self.head_c)

    def group_logits(self, x) -> np.ndarray:
        return linear_forward(self.extract_features(x), self.head_a)

    def params(self):
        return self.encoder.params() + self.head_c.params() + self.head_a.params()

    def tensors(self) -> list[np.ndarray]:
        return [theta for theta, _ in self.params()]


def extract_features(net: DualHeadNetwork, batch) -> np.ndarray:
    return net.extract_features(batch)


def class_posterior(net: DualHeadNetwork, batch) -> np.ndarray:
    return softmax(net.class_logits(batch))


def group_posterior(net: DualHeadNetwork, batch) -> np.ndarray:
    return softmax(net.group_logits(batch))


# Checkpoint layout (little-endian):
#   b"UDG1" | u32 version | u32 input_dim | u32 n_hidden | u32 hidden[n_hidden]
#   | u32 n_classes | u32 k_groups | f64 tensors in params() order


def save_checkpoint(net: DualHeadNetwork, path) -> None:
    hidden = net.hidden
    header = MAGIC + struct.pack(
        f"<III{len(hidden)}III", VERSION, net.input_dim, len(hidden), *hidden,
        net.n_classes, net.k_groups)
    body = b"".join(t.astype("<f8").tobytes() for t in net.tensors())
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> DualHeadNetwork:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a UDG checkpoint")
    try:
        version, input_dim, n_hidden = struct.unpack_from("<III", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
        off = 16
        hidden = list(struct.unpack_from(f"<{n_hidden}I", raw, off))
        off += 4 * n_hidden
        n_classes, k_groups = struct.unpack_from("<II", raw, off)
        off += 8
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    net = DualHeadNetwork.init(input_dim, hidden, n_classes, k_groups, np.random.default_rng(0))
    for t in net.tensors():
        n = t.size * 8
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data")
        t[...] = np.frombuffer(raw, dtype="<f8", count=t.size, offset=off).reshape(t.shape)
        off += n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return net

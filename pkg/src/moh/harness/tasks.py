"""Synthetic sequence tasks with planted structure.

Every sequence has ``seq_len`` tokens of dimension ``feature_dim``; the
last ``F`` features are flags and the rest is content. Each token carries
a random class code in its content. The label is the class code of the
needle, the token whose flag matches the sequence's cluster, so averaging
the raw sequence blurs the label and a model has to attend.

``sequence-classification``: each sequence belongs to one of
``num_clusters`` latent clusters (``F = num_clusters``). Every token
carries the cluster's marker vector and codes come from a cluster-specific
codebook. Besides the needle, one decoy token per other cluster raises that
cluster's flag, so where to attend depends on the cluster, which rewards
heads that specialise by cluster. Clusters are the categories for
head-load analysis.

``needle-copy``: one global codebook, no markers, a single flag (``F = 1``)
and no decoys; every sequence is in cluster 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError
from ..tensor import Tensor

TASK_KINDS = ("sequence-classification", "needle-copy")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "sequence-classification"
    feature_dim: int = 32
    seq_len: int = 8
    num_classes: int = 4
    num_clusters: int = 4
    n_train: int = 2048
    n_test: int = 256
    noise: float = 0.3
    signal: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        for name in ("feature_dim", "seq_len", "num_classes", "num_clusters", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.feature_dim < 2 or self.num_classes < 2:
            raise ConfigError("need feature_dim >= 2 and num_classes >= 2")
        if self.kind == "sequence-classification" and (
                self.num_clusters > self.seq_len or self.feature_dim <= self.num_clusters):
            raise ConfigError("need num_clusters <= seq_len and feature_dim > num_clusters")
        if self.noise < 0 or self.signal <= 0:
            raise ConfigError("need noise >= 0 and signal > 0")

    def with_seed(self, seed: int) -> "TaskSpec":
        return replace(self, seed=seed)


@dataclass
class Dataset:
    X: np.ndarray         # [N x T x D]
    y: np.ndarray         # [N] class labels
    clusters: np.ndarray  # [N] latent cluster ids
    needle: np.ndarray    # [N] needle position

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return Tensor(self.X[i]), int(self.y[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def _unit_rows(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _balanced(rng, n, k):
    return rng.permutation(np.arange(n) % k)


def _sample(spec: TaskSpec, rng, n, markers, codebook) -> Dataset:
    T, D, C = spec.seq_len, spec.feature_dim, spec.num_classes
    n_clusters, _, dc = codebook.shape
    y = _balanced(rng, n, C)
    z = _balanced(rng, n, n_clusters)
    # position 0 of each permutation is the needle, 1..n_clusters-1 the decoys
    slots = np.argsort(rng.random((n, T)), axis=1)[:, :n_clusters]
    needle = slots[:, 0]
    codes = rng.integers(0, C, (n, T))
    codes[np.arange(n), needle] = y

    X = np.zeros((n, T, D))
    X[..., :dc] = codebook[z[:, None], codes] + markers[z][:, None, :]
    X[..., :dc] += spec.noise * rng.standard_normal((n, T, dc))
    flags = (z[:, None] + np.arange(n_clusters)[None, :]) % n_clusters
    X[np.arange(n)[:, None], slots, dc + flags] = 1.0
    return Dataset(X=X, y=y, clusters=z, needle=needle)


def gen_task(spec: TaskSpec):
    """Deterministic (train, test) datasets for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    n_flags = 1 if spec.kind == "needle-copy" else spec.num_clusters
    dc = spec.feature_dim - n_flags
    if spec.kind == "needle-copy":
        markers = np.zeros((1, dc))
        codebook = spec.signal * _unit_rows(rng, (1, spec.num_classes, dc))
    else:
        markers = _unit_rows(rng, (spec.num_clusters, dc))
        codebook = spec.signal * _unit_rows(rng, (spec.num_clusters, spec.num_classes, dc))
    train = _sample(spec, rng, spec.n_train, markers, codebook)
    test = _sample(spec, rng, spec.n_test, markers, codebook)
    return train, test


def linear_probe_accuracy(train: Dataset, test: Dataset, ridge: float = 1e-2) -> float:
    """Held-out accuracy of a ridge-regression probe on the flattened raw features."""
    def feats(ds):
        f = ds.X.reshape(len(ds), -1)
        return np.hstack([f, np.ones((len(ds), 1))])

    A = feats(train)
    C = int(max(train.y.max(), test.y.max())) + 1
    Y = np.eye(C)[train.y]
    W = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ Y)
    pred = (feats(test) @ W).argmax(axis=1)
    return float(np.mean(pred == test.y))

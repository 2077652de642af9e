"""Head-load density per category and head-redundancy metrics."""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import MHAWeights, head_output
from .errors import ContractError, ShapeError
from .layer import RoutingDecision
from .tensor import Tensor, matmul


@dataclass
class HeadLoadProfile:
    category: object
    density: np.ndarray  # per head: activations / tokens in the category
    tokens: int
    h_s: int = 0

    def routed(self) -> np.ndarray:
        return self.density[self.h_s:]


class HeadLoadAccumulator:
    """Streams (decision, category) pairs into per-category activation counts."""

    def __init__(self, h: int, h_s: int = 0):
        self.h = h
        self.h_s = h_s
        self._counts: dict = {}
        self._tokens: dict = {}

    def update(self, d: RoutingDecision, label) -> None:
        if d.h != self.h:
            raise ShapeError(f"decision has {d.h} heads, accumulator expects {self.h}")
        active = (d.gates.data != 0).sum(axis=0).astype(np.int64)
        if label not in self._counts:
            self._counts[label] = np.zeros(self.h, dtype=np.int64)
            self._tokens[label] = 0
        self._counts[label] += active
        self._tokens[label] += d.n_tokens

    def profiles(self, categories: Optional[Sequence] = None) -> list:
        cats = sorted(self._counts, key=repr) if categories is None else list(categories)
        out = []
        for c in cats:
            n = self._tokens.get(c, 0)
            if n == 0:
                warnings.warn(f"category {c!r} has no tokens; skipped", stacklevel=2)
                continue
            out.append(HeadLoadProfile(category=c, density=self._counts[c] / n, tokens=n, h_s=self.h_s))
        return out


def head_load_density(decisions: Sequence[RoutingDecision], labels: Sequence, categories: Optional[Sequence] = None,
                      h_s: Optional[int] = None) -> list:
    """Per-category fraction of tokens that activate each head.

    ``decisions[j]`` covers the tokens of one sample whose category is
    ``labels[j]``. Categories listed in ``categories`` but never seen are
    skipped with a warning.
    """
    decisions = list(decisions)
    labels = list(labels)
    if len(decisions) != len(labels):
        raise ContractError(f"{len(decisions)} decisions but {len(labels)} labels")
    if not decisions:
        return []
    acc = HeadLoadAccumulator(decisions[0].h, decisions[0].h_s if h_s is None else h_s)
    for d, lab in zip(decisions, labels):
        acc.update(d, lab)
    return acc.profiles(categories)


def category_tv_distance(profiles: Sequence[HeadLoadProfile]) -> dict:
    """Total-variation distance between routed-density vectors of each category pair.

    Each routed density vector sums to K, so it is divided by its sum first.
    """
    out = {}
    for a, b in itertools.combinations(profiles, 2):
        pa, pb = a.routed(), b.routed()
        if pa.sum() == 0 or pb.sum() == 0:
            continue
        out[(a.category, b.category)] = 0.5 * float(np.abs(pa / pa.sum() - pb / pb.sum()).sum())
    return out


def attention_pattern_similarity(A, A2, tol: float = 1e-6) -> float:
    """1 - 0.5 * mean over query rows of ||A_row - A2_row||_1, for row-stochastic A, A2."""
    A = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=np.float64)
    A2 = np.asarray(A2.data if isinstance(A2, Tensor) else A2, dtype=np.float64)
    if A.shape != A2.shape or A.ndim < 2:
        raise ShapeError(f"attention matrices {A.shape} and {A2.shape} differ")
    for M in (A, A2):
        if np.any(M < -tol) or np.any(np.abs(M.sum(axis=-1) - 1.0) > tol):
            raise ContractError("attention rows must be probability distributions")
    l1 = np.abs(A - A2).sum(axis=-1)
    return float(1.0 - 0.5 * l1.mean())


def output_feature_cosine(H, H2, with_count: bool = False):
    """Mean cosine between corresponding rows; rows where either side is zero are skipped."""
    H = np.asarray(H.data if isinstance(H, Tensor) else H, dtype=np.float64)
    H2 = np.asarray(H2.data if isinstance(H2, Tensor) else H2, dtype=np.float64)
    if H.shape != H2.shape:
        raise ShapeError(f"feature matrices {H.shape} and {H2.shape} differ")
    H = H.reshape(-1, H.shape[-1])
    H2 = H2.reshape(-1, H2.shape[-1])
    n1 = np.linalg.norm(H, axis=1)
    n2 = np.linalg.norm(H2, axis=1)
    ok = (n1 > 0) & (n2 > 0)
    skipped = int((~ok).sum())
    value = float(np.mean((H[ok] * H2[ok]).sum(axis=1) / (n1[ok] * n2[ok]))) if ok.any() else float("nan")
    return (value, skipped) if with_count else value


@dataclass
class HeadSimilarity:
    attn: np.ndarray    # [h x h] attention-pattern similarity
    cosine: np.ndarray  # [h x h] output-feature cosine

    def pairs(self):
        h = self.attn.shape[0]
        for i, j in itertools.combinations(range(h), 2):
            yield i, j, float(self.attn[i, j]), float(self.cosine[i, j])

    def mean_attn(self) -> float:
        return float(np.mean([a for _, _, a, _ in self.pairs()]))

    def mean_cosine(self) -> float:
        return float(np.mean([c for _, _, _, c in self.pairs()]))


def head_similarity(w: MHAWeights, X, batch_size: int = 128) -> HeadSimilarity:
    """Pairwise head similarity over every query row of ``X`` ([N x T x d_in]).

    Output features of head i are its projected contribution H^i W_O^i, so
    all heads are compared in the same d_out space. Gates are not applied.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    h = w.h
    attn_sum = np.zeros((h, h))
    cos_sum = np.zeros((h, h))
    cos_rows = np.zeros((h, h))
    rows = 0
    for start in range(0, X.shape[0], batch_size):
        xb = Tensor(X[start:start + batch_size])
        A, F = [], []
        for i in range(h):
            H, Ai = head_output(xb, xb, w, i, return_weights=True)
            A.append(Ai.data)
            F.append(matmul(H, w.W_O_rows[i]).data)
        n = A[0].shape[0] * A[0].shape[1]
        for i, j in itertools.combinations(range(h), 2):
            s = attention_pattern_similarity(A[i], A[j]) * n
            c, skipped = output_feature_cosine(F[i], F[j], with_count=True)
            attn_sum[i, j] += s
            if skipped < n:
                cos_sum[i, j] += c * (n - skipped)
                cos_rows[i, j] += n - skipped
        rows += n
    attn_sum /= rows
    cos_sum = np.where(cos_rows > 0, cos_sum / np.maximum(cos_rows, 1), np.nan)
    iu = np.triu_indices(h, 1)
    attn_sum.T[iu] = attn_sum[iu]
    cos_sum.T[iu] = cos_sum[iu]
    np.fill_diagonal(attn_sum, 1.0)
    np.fill_diagonal(cos_sum, 1.0)
    return HeadSimilarity(attn=attn_sum, cosine=cos_sum)


def write_head_load_csv(profiles: Sequence[HeadLoadProfile], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "head_index", "head_type", "density"])
        for p in profiles:
            for i, rho in enumerate(p.density):
                w.writerow([p.category, i, "shared" if i < p.h_s else "routed", f"{rho:.6f}"])


def write_similarity_csv(sim: HeadSimilarity, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["head_i", "head_j", "attn_sim", "cos_sim"])
        for i, j, a, c in sim.pairs():
            w.writerow([i, j, f"{a:.6f}", f"{c:.6f}"])

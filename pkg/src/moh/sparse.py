"""Head-masked sparse inference and its timing benchmark.

Sparsity is exploited per head: the tokens that activate head i are
gathered, only their queries are projected and attended, and the result is
scattered back. Keys and values of a live head cover the full key/value
sequence, because every query attends over all of it.

Timing is reported next to an exact multiply-add count; the count is the
hardware-independent measure, wall-clock the supporting evidence.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import MHAWeights
from .errors import ContractError, ShapeError
from .layer import RoutingDecision, top_k_indices
from .tensor import Tensor


@dataclass
class HeadMask:
    bits: np.ndarray  # [N x h] bool
    tokens: list      # tokens[i]: sorted int array of tokens that activate head i

    @classmethod
    def from_bits(cls, bits) -> "HeadMask":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2:
            raise ShapeError(f"mask bits must be [tokens x heads], got {bits.shape}")
        return cls(bits=bits, tokens=[np.flatnonzero(bits[:, i]) for i in range(bits.shape[1])])

    @property
    def h(self) -> int:
        return self.bits.shape[1]

    def popcounts(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    def active_per_head(self) -> np.ndarray:
        return np.array([len(t) for t in self.tokens], dtype=np.int64)


def build_head_mask(d: RoutingDecision) -> HeadMask:
    return HeadMask.from_bits(d.gates.data != 0)


def _gate_array(gates) -> np.ndarray:
    return np.asarray(gates.data if isinstance(gates, Tensor) else gates, dtype=np.float64)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def sparse_attention_forward(X, Xp, w: MHAWeights, mask: HeadMask, gates) -> np.ndarray:
    """Gated MoH output computed only over activated (head, token) pairs.

    ``X`` is [T x d_in] (a [B x T x d_in] batch is handled sequence by
    sequence, with mask and gates over the flattened B*T tokens).
    """
    X = _gate_array(X)
    Xp = X if Xp is None else _gate_array(Xp)
    g = _gate_array(gates)
    if g.shape != mask.bits.shape or mask.h != w.h:
        raise ContractError(f"gates {g.shape}, mask {mask.bits.shape} and {w.h} heads disagree")
    if not np.array_equal(g != 0, mask.bits):
        raise ContractError("mask bits do not match the nonzero pattern of the gates")
    if X.ndim == 3:
        T = X.shape[1]
        parts = []
        for b in range(X.shape[0]):
            sl = slice(b * T, (b + 1) * T)
            parts.append(sparse_attention_forward(X[b], Xp[b], w, HeadMask.from_bits(mask.bits[sl]), g[sl]))
        return np.stack(parts)
    if X.ndim != 2 or X.shape[1] != w.d_in or Xp.shape[1] != w.d_in:
        raise ShapeError(f"inputs {X.shape}, {Xp.shape} do not match d_in={w.d_in}")
    if g.shape[0] != X.shape[0]:
        raise ShapeError(f"gates cover {g.shape[0]} tokens, input has {X.shape[0]}")

    out = np.zeros((X.shape[0], w.d_out))
    for i in range(w.h):
        toks = mask.tokens[i]
        if toks.size == 0:
            continue
        q = X[toks] @ w.W_Q[i].data
        k = Xp @ w.W_K[i].data
        v = Xp @ w.W_V[i].data
        a = _softmax_rows((q @ k.T) * (1.0 / math.sqrt(q.shape[1])))
        out[toks] += ((a @ v) @ w.W_O_rows[i].data) * g[toks, i, None]
    return out


def layer_flops(active_per_head: Sequence[int], n_keys: int, d_in: int, d_head_k: int, d_head_v: int,
                d_out: int) -> int:
    """Exact multiply-add count of :func:`sparse_attention_forward`."""
    total = 0
    for n in active_per_head:
        n = int(n)
        if n == 0:
            continue
        total += n * d_in * d_head_k                 # queries
        total += n_keys * d_in * (d_head_k + d_head_v)  # keys, values
        total += n * n_keys * (d_head_k + d_head_v)  # scores, weighted values
        total += n * d_head_v * d_out                # output rows
        total += n * d_out                           # gate
    return total


def head_masked_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, tokens: Sequence[np.ndarray],
                          gates: np.ndarray) -> np.ndarray:
    """Attention core over precomputed [h x T x d] features, restricted to active query rows.

    Both sides of the benchmark run through this kernel; the dense baseline
    simply passes every token for every head.
    """
    h, T, dh = Q.shape
    out = np.zeros((T, h, dh))
    s = 1.0 / math.sqrt(dh)
    for i in range(h):
        toks = tokens[i]
        if toks.size == 0:
            continue
        a = _softmax_rows((Q[i, toks] @ K[i].T) * s)
        out[toks, i] = (a @ V[i]) * gates[toks, i, None]
    return out


def kernel_flops(active_per_head: Sequence[int], n_keys: int, head_dim: int) -> int:
    return sum(int(n) * n_keys * 2 * head_dim for n in active_per_head)


@dataclass
class BenchReport:
    head_num: int
    head_dim: int
    seq_len: int
    activation_ratio: float
    dense_time: float   # ms, median
    sparse_time: float  # ms, median
    flops_dense: int
    flops_sparse: int

    @property
    def speedup(self) -> float:
        return self.dense_time / self.sparse_time


def random_head_mask(seq_len: int, head_num: int, ratio: float, rng: np.random.Generator) -> HeadMask:
    active = min(head_num, max(1, round(ratio * head_num)))
    sel = top_k_indices(rng.standard_normal((seq_len, head_num)), active)
    bits = np.zeros((seq_len, head_num), dtype=bool)
    bits[np.arange(seq_len)[:, None], sel] = True
    return HeadMask.from_bits(bits)


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1e3


def benchmark_inference(head_num: int, head_dim: int, seq_len: int, ratios: Sequence[float], reps: int = 11,
                        warmup: int = 3, seed: int = 0) -> list:
    """Median wall-clock of the masked kernel at each activation ratio vs. full activation."""
    if reps < 5:
        raise ContractError(f"reps must be >= 5, got {reps}")
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    Q, K, V = (rng.standard_normal((head_num, seq_len, head_dim)) for _ in range(3))
    full = [np.arange(seq_len)] * head_num
    ones = np.ones((seq_len, head_num))
    reports = []
    with threadpool_limits(limits=1):
        for ratio in ratios:
            mask = random_head_mask(seq_len, head_num, ratio, rng)
            gates = np.where(mask.bits, rng.uniform(0.1, 1.0, mask.bits.shape), 0.0)
            dense, sparse = [], []
            for rep in range(warmup + reps):
                td = _timed(lambda: head_masked_attention(Q, K, V, full, ones))
                ts = _timed(lambda: head_masked_attention(Q, K, V, mask.tokens, gates))
                if rep >= warmup:
                    dense.append(td)
                    sparse.append(ts)
            reports.append(BenchReport(
                head_num=head_num, head_dim=head_dim, seq_len=seq_len, activation_ratio=float(ratio),
                dense_time=statistics.median(dense), sparse_time=statistics.median(sparse),
                flops_dense=kernel_flops([seq_len] * head_num, seq_len, head_dim),
                flops_sparse=kernel_flops(mask.active_per_head(), seq_len, head_dim)))
    return reports


BENCH_COLUMNS = ("head_num", "head_dim", "seq_len", "ratio", "dense_ms", "sparse_ms", "speedup",
                 "flops_dense", "flops_sparse")


def _row(r: BenchReport) -> list:
    return [r.head_num, r.head_dim, r.seq_len, f"{r.activation_ratio:g}", f"{r.dense_time:.4f}",
            f"{r.sparse_time:.4f}", f"{r.speedup:.4f}", r.flops_dense, r.flops_sparse]


def write_bench_csv(reports: Sequence[BenchReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for r in reports:
            writer.writerow(_row(r))


def format_bench_table(reports: Sequence[BenchReport]) -> str:
    rows = [list(BENCH_COLUMNS)] + [[str(c) for c in _row(r)] for r in reports]
    widths = [max(len(row[j]) for row in rows) for j in range(len(BENCH_COLUMNS))]
    return "\n".join("  ".join(c.rjust(wd) for c, wd in zip(row, widths)) for row in rows)

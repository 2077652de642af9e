"""Reference multi-head attention in concatenation and summation form."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, matmul, softmax, transpose, scale


@dataclass
class MHAWeights:
    """Per-head projection weights.

    ``W_O_rows[i]`` is the block of rows of the output projection that
    belongs to head ``i``; the full ``W_O`` is their vertical stack and is
    derived, so both attention forms share one set of parameters.
    """

    W_Q: list
    W_K: list
    W_V: list
    W_O_rows: list

    def __post_init__(self):
        h = len(self.W_Q)
        if h == 0 or not (len(self.W_K) == len(self.W_V) == len(self.W_O_rows) == h):
            raise ShapeError("MHAWeights needs the same non-zero number of Q, K, V and W_O row blocks")
        qk = {w.shape for w in self.W_Q} | {w.shape for w in self.W_K}
        v = {w.shape for w in self.W_V}
        o = {w.shape for w in self.W_O_rows}
        if len(qk) != 1 or len(v) != 1 or len(o) != 1:
            raise ShapeError(f"per-head shapes differ: Q/K {qk}, V {v}, O {o}")
        (d_in, _), = qk
        (d_in_v, dv_head), = v
        (o_rows, _), = o
        if d_in_v != d_in or o_rows != dv_head:
            raise ShapeError("value projection and output row blocks do not line up")

    @property
    def h(self) -> int:
        return len(self.W_Q)

    @property
    def d_in(self) -> int:
        return self.W_Q[0].shape[0]

    @property
    def d_k(self) -> int:
        return self.W_Q[0].shape[1] * self.h

    @property
    def d_v(self) -> int:
        return self.W_V[0].shape[1] * self.h

    @property
    def d_out(self) -> int:
        return self.W_O_rows[0].shape[1]

    @property
    def W_O(self) -> Tensor:
        return concat(self.W_O_rows, axis=0)

    @classmethod
    def init(cls, h: int, d_in: int, d_k: int, d_v: Optional[int] = None, d_out: Optional[int] = None,
             rng: Optional[np.random.Generator] = None) -> "MHAWeights":
        d_v = d_k if d_v is None else d_v
        d_out = d_in if d_out is None else d_out
        if d_k % h or d_v % h:
            raise ConfigError(f"d_k={d_k} and d_v={d_v} must be divisible by h={h}")
        rng = np.random.default_rng() if rng is None else rng
        s_in = 1.0 / math.sqrt(d_in)

        def p(shape, std):
            return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

        return cls(
            W_Q=[p((d_in, d_k // h), s_in) for _ in range(h)],
            W_K=[p((d_in, d_k // h), s_in) for _ in range(h)],
            W_V=[p((d_in, d_v // h), s_in) for _ in range(h)],
            W_O_rows=[p((d_v // h, d_out), 1.0 / math.sqrt(d_v)) for _ in range(h)],
        )

    @classmethod
    def from_fused(cls, W_Q, W_K, W_V, W_O, h: int) -> "MHAWeights":
        """Split full projection matrices column-wise (Q/K/V) and row-wise (O)."""
        W_Q, W_K, W_V, W_O = (np.asarray(a, dtype=np.float64) for a in (W_Q, W_K, W_V, W_O))
        if W_Q.shape[1] % h or W_V.shape[1] % h or W_O.shape[0] != W_V.shape[1]:
            raise ShapeError(f"cannot split {W_Q.shape}, {W_V.shape}, {W_O.shape} into {h} heads")

        def cols(a):
            return [Tensor(c, requires_grad=True) for c in np.split(a, h, axis=1)]

        return cls(W_Q=cols(W_Q), W_K=cols(W_K), W_V=cols(W_V),
                   W_O_rows=[Tensor(r, requires_grad=True) for r in np.split(W_O, h, axis=0)])

    def parameters(self) -> dict:
        out = {}
        for name in ("W_Q", "W_K", "W_V", "W_O_rows"):
            for i, t in enumerate(getattr(self, name)):
                out[f"{name}.{i}"] = t
        return out

    @classmethod
    def from_parameters(cls, params: dict, h: int) -> "MHAWeights":
        return cls(**{name: [params[f"{name}.{i}"] for i in range(h)]
                      for name in ("W_Q", "W_K", "W_V", "W_O_rows")})

    def permuted(self, order: Sequence[int]) -> "MHAWeights":
        order = list(order)
        return MHAWeights(W_Q=[self.W_Q[i] for i in order], W_K=[self.W_K[i] for i in order],
                          W_V=[self.W_V[i] for i in order], W_O_rows=[self.W_O_rows[i] for i in order])


def scaled_dot_product_attention(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    """Softmax(Q K^T / sqrt(d)) V over the last two axes."""
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query {Q.shape} and key {K.shape} disagree on feature dim")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"key {K.shape} and value {V.shape} disagree on length")
    A = softmax(scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(Q.shape[-1])))
    out = matmul(A, V)
    return (out, A) if return_weights else out


def _check_inputs(X: Tensor, Xp: Tensor, w: MHAWeights) -> None:
    if X.shape[-1] != w.d_in or Xp.shape[-1] != w.d_in:
        raise ShapeError(f"inputs {X.shape}, {Xp.shape} do not match d_in={w.d_in}")
    if X.ndim != Xp.ndim or X.shape[:-2] != Xp.shape[:-2]:
        raise ShapeError(f"query and key/value inputs {X.shape}, {Xp.shape} have different batch shapes")


def head_output(X: Tensor, Xp: Tensor, w: MHAWeights, i: int, return_weights: bool = False):
    """H^i = Attention(X W_Q^i, X' W_K^i, X' W_V^i)."""
    return scaled_dot_product_attention(matmul(X, w.W_Q[i]), matmul(Xp, w.W_K[i]), matmul(Xp, w.W_V[i]),
                                        return_weights=return_weights)


def multi_head_concat(X: Tensor, Xp: Optional[Tensor], w: MHAWeights) -> Tensor:
    Xp = X if Xp is None else Xp
    _check_inputs(X, Xp, w)
    heads = [head_output(X, Xp, w, i) for i in range(w.h)]
    return matmul(concat(heads, axis=-1), w.W_O)


def multi_head_sum(X: Tensor, Xp: Optional[Tensor], w: MHAWeights) -> Tensor:
    Xp = X if Xp is None else Xp
    _check_inputs(X, Xp, w)
    out = None
    for i in range(w.h):
        term = matmul(head_output(X, Xp, w, i), w.W_O_rows[i])
        out = term if out is None else out + term
    return out

"""Turn a trained dense multi-head attention layer into a MoH layer.

The leading ``h_s`` heads become shared heads. Routed heads are ranked per
token by the l2 norm of their query, so the converted layer needs no new
router weights. Gates are quantized to {0, 1} with a straight-through
estimator, which keeps the output distribution of the dense layer: with
every head selected the converted layer reproduces it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import MHAWeights
from .errors import ConfigError, ContractError, ShapeError
from .layer import MoHConfig, MoHLayer, RouterState, RoutingDecision, top_k_indices
from .tensor import Tensor, concat, matmul, mul, reshape, row_norm, softmax, straight_through, transpose


@dataclass
class RetrofitPlan:
    h_s: int
    K: int
    source: MHAWeights

    def __post_init__(self):
        h = self.source.h
        if not 0 <= self.h_s < h:
            raise ConfigError(f"need 0 <= h_s < h={h}, got h_s={self.h_s}")
        if not 0 <= self.K <= h - self.h_s or self.h_s + self.K == 0:
            raise ConfigError(f"need 0 <= K <= {h - self.h_s} and at least one active head, got K={self.K}")

    @property
    def shared_heads(self) -> tuple:
        return tuple(range(self.h_s))


def query_heads(X: Tensor, w: MHAWeights) -> list:
    """Raw per-head queries X W_Q^i (before the 1/sqrt(d) attention scaling)."""
    return [matmul(X, w.W_Q[i]) for i in range(w.h)]


def parameter_free_route(Q_heads: Sequence[Tensor], plan: RetrofitPlan, selection=None) -> RoutingDecision:
    """Quantized gates from per-head query norms.

    The real-valued score of head i is ||q_i||; shared heads are always on and
    the K routed heads with the largest norms are selected (ties to the lowest
    index). ``selection`` ([N x K] routed indices) overrides the ranking.
    """
    if len(Q_heads) == 0:
        raise ContractError("no query heads given")
    if len(Q_heads) != plan.source.h:
        raise ShapeError(f"{len(Q_heads)} query heads for a {plan.source.h}-head layer")
    flat = []
    for q in Q_heads:
        if q.data.size == 0:
            raise ContractError(f"empty query tensor of shape {q.shape}")
        flat.append(q if q.ndim == 2 else reshape(q, (-1, q.shape[-1])))
    scores = concat([row_norm(q) for q in flat], axis=1)
    n = scores.shape[0]

    h_s, K = plan.h_s, plan.K
    if selection is None:
        selection = top_k_indices(scores.data[:, h_s:], K)
    else:
        selection = np.sort(np.asarray(selection, dtype=np.int64).reshape(n, K), axis=-1)
    activated = [tuple(range(h_s)) + tuple(int(j) + h_s for j in row) for row in selection]
    gates = ste_quantize(scores, activated)
    return RoutingDecision(gates=gates, activated=activated, h_s=h_s, routed_scores=scores.data[:, h_s:])


def ste_quantize(g: Tensor, selections) -> Tensor:
    """Indicator of selected heads in the forward pass; identity gradient to ``g``."""
    if g.ndim != 2:
        raise ShapeError(f"scores must be [tokens x heads], got {g.shape}")
    selections = list(selections)
    if len(selections) != g.shape[0]:
        raise ContractError(f"{len(selections)} selections for {g.shape[0]} tokens")
    q = np.zeros(g.shape)
    for t, sel in enumerate(selections):
        q[t, list(sel)] = 1.0
    return straight_through(q, g)


def parameter_free_route_layer(layer: MoHLayer, X: Tensor, selection=None) -> RoutingDecision:
    cfg = layer.cfg
    plan = RetrofitPlan(cfg.h_s, cfg.K, layer.attn)
    d = parameter_free_route(query_heads(X, layer.attn), plan, selection=selection)
    if cfg.use_alpha:
        Xf = X if X.ndim == 2 else reshape(X, (-1, X.shape[-1]))
        alpha = softmax(matmul(Xf, transpose(layer.router.W_h)))
        weights = concat([alpha[:, 0:1]] * cfg.h_s + [alpha[:, 1:2]] * cfg.n_routed, axis=1)
        d.gates = mul(d.gates, weights)
        d.alpha = alpha
    return d


def convert_dense_to_moh(w: MHAWeights, plan: RetrofitPlan, use_alpha: bool = False, beta: float = 0.01) -> MoHLayer:
    """Wrap ``w`` (unchanged, shared by reference) in a parameter-free MoH layer.

    With ``use_alpha`` a [2 x d_in] head-type projection is added, initialised
    to zero so that both head groups start at weight 1/2.
    """
    if plan.source is not w:
        raise ContractError("plan was made for a different set of weights")
    if plan.h_s >= w.h:
        raise ConfigError(f"h_s={plan.h_s} must be smaller than h={w.h}")
    cfg = MoHConfig(h=w.h, h_s=plan.h_s, K=plan.K, d_in=w.d_in, d_k=w.d_k, d_v=w.d_v, d_out=w.d_out,
                    beta=beta, router_mode="parameter-free", use_alpha=use_alpha)
    router = None
    if use_alpha:
        router = RouterState(W_s=None, W_r=None, W_h=Tensor(np.zeros((2, w.d_in)), requires_grad=True))
    return MoHLayer(cfg, w, router)

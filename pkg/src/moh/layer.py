"""Mixture-of-Head attention: shared + Top-K routed heads with two-stage gates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import MHAWeights, head_output
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, concat, matmul, mean, mul, reshape, softmax, sum_all, transpose, zeros

ROUTER_MODES = ("two-stage", "parameter-free", "dense")


@dataclass(frozen=True)
class MoHConfig:
    """Architecture of one MoH layer.

    ``router_mode='dense'`` is plain multi-head attention (every gate is 1);
    ``'parameter-free'`` ranks heads by query norm (see :mod:`moh.retrofit`).
    A model whose layers need different head budgets uses one config per layer.
    """

    h: int
    h_s: int
    K: int
    d_in: int
    d_k: Optional[int] = None
    d_v: Optional[int] = None
    d_out: Optional[int] = None
    beta: float = 0.01
    router_mode: str = "two-stage"
    use_alpha: bool = False  # parameter-free mode only: scale quantized gates by learned (a1, a2)

    def __post_init__(self):
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.d_in)
        if self.d_v is None:
            object.__setattr__(self, "d_v", self.d_k)
        if self.d_out is None:
            object.__setattr__(self, "d_out", self.d_in)
        if self.router_mode not in ROUTER_MODES:
            raise ConfigError(f"router_mode must be one of {ROUTER_MODES}, got {self.router_mode!r}")
        if self.h < 1:
            raise ConfigError(f"h must be >= 1, got {self.h}")
        if min(self.d_in, self.d_k, self.d_v, self.d_out) < 1:
            raise ConfigError("all dimensions must be positive")
        if self.d_k % self.h or self.d_v % self.h:
            raise ConfigError(f"d_k={self.d_k} and d_v={self.d_v} must be divisible by h={self.h}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.router_mode == "dense":
            if self.h_s != 0 or self.K != self.h:
                raise ConfigError("dense mode activates every head: use h_s=0, K=h")
            return
        if not 0 <= self.h_s < self.h:
            raise ConfigError(f"need 0 <= h_s < h, got h_s={self.h_s}, h={self.h}")
        min_k = 0 if (self.router_mode == "parameter-free" and self.h_s > 0) else 1
        if not min_k <= self.K <= self.h - self.h_s:
            raise ConfigError(f"need {min_k} <= K <= h - h_s = {self.h - self.h_s}, got K={self.K}")
        if self.use_alpha and (self.router_mode != "parameter-free" or self.h_s == 0):
            raise ConfigError("use_alpha applies to parameter-free routing with shared heads")

    @property
    def n_routed(self) -> int:
        return self.h - self.h_s

    @property
    def activation_ratio(self) -> float:
        return (self.h_s + self.K) / self.h


@dataclass
class RouterState:
    """Routing projections: shared [h_s x d_in], routed [(h-h_s) x d_in], head-type [2 x d_in].

    ``W_s`` and ``W_h`` are None when there are no shared heads.
    """

    W_s: Optional[Tensor]
    W_r: Optional[Tensor]  # None only for the alpha-only router of a parameter-free layer
    W_h: Optional[Tensor]

    @classmethod
    def init(cls, cfg: MoHConfig, rng: Optional[np.random.Generator] = None) -> "RouterState":
        rng = np.random.default_rng() if rng is None else rng
        std = 1.0 / math.sqrt(cfg.d_in)

        def p(rows):
            return Tensor(rng.normal(0.0, std, (rows, cfg.d_in)), requires_grad=True)

        if cfg.h_s:
            return cls(W_s=p(cfg.h_s), W_r=p(cfg.n_routed), W_h=p(2))
        return cls(W_s=None, W_r=p(cfg.n_routed), W_h=None)

    def check(self, cfg: MoHConfig) -> None:
        want = {"W_s": (cfg.h_s, cfg.d_in) if cfg.h_s else None,
                "W_r": (cfg.n_routed, cfg.d_in),
                "W_h": (2, cfg.d_in) if cfg.h_s else None}
        for name, shape in want.items():
            t = getattr(self, name)
            got = None if t is None else t.shape
            if got != shape:
                raise ShapeError(f"router {name} has shape {got}, config needs {shape}")

    def parameters(self) -> dict:
        return {k: v for k, v in (("W_s", self.W_s), ("W_r", self.W_r), ("W_h", self.W_h)) if v is not None}


@dataclass
class RoutingDecision:
    """Per-token gates over all h heads.

    ``gates`` is [N x h] with exact zeros at inactive heads; ``activated[t]``
    is the sorted tuple of active head indices of token t. ``alpha`` and
    ``routed_probs`` are only present for two-stage routing.
    """

    gates: Tensor
    activated: list
    alpha: Optional[Tensor] = None
    routed_probs: Optional[Tensor] = None
    h_s: int = 0
    routed_scores: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_tokens(self) -> int:
        return self.gates.shape[0]

    @property
    def h(self) -> int:
        return self.gates.shape[1]

    def routed_selections(self) -> list:
        """Per-token selected routed heads, indexed within the routed block."""
        return [tuple(i - self.h_s for i in act if i >= self.h_s) for act in self.activated]

    @classmethod
    def full(cls, n_tokens: int, h: int) -> "RoutingDecision":
        """Every head active with gate exactly 1 (plain multi-head attention)."""
        return cls(gates=Tensor(np.ones((n_tokens, h))), activated=[tuple(range(h))] * n_tokens)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k largest scores, ties to the lowest index.

    Returned indices are sorted ascending within each row.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if k < 0 or k > scores.shape[-1]:
        raise ContractError(f"cannot take top {k} of {scores.shape[-1]}")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def _flatten_tokens(X: Tensor) -> Tensor:
    return X if X.ndim == 2 else reshape(X, (-1, X.shape[-1]))


def route_two_stage(X: Tensor, r: RouterState, cfg: MoHConfig, selection=None) -> RoutingDecision:
    """Two-stage routing gates for every token of ``X`` (any leading shape).

    Routed gates are alpha2 * Softmax(W_r x) at the Top-K routed logits and
    zero elsewhere; the softmax runs over all routed heads and is not
    renormalised over the selected subset. ``selection`` ([N x K] routed
    indices) overrides Top-K, which lets gradient checks hold it fixed.
    """
    if cfg.router_mode != "two-stage":
        raise ConfigError(f"route_two_stage called with router_mode={cfg.router_mode!r}")
    if cfg.K > cfg.n_routed:
        raise ConfigError(f"K={cfg.K} exceeds the {cfg.n_routed} routed heads")
    if X.shape[-1] != cfg.d_in:
        raise ShapeError(f"router input {X.shape} does not match d_in={cfg.d_in}")
    r.check(cfg)
    Xf = _flatten_tokens(X)
    n = Xf.shape[0]

    logits_r = matmul(Xf, transpose(r.W_r))
    probs_r = softmax(logits_r)
    if selection is None:
        selection = top_k_indices(logits_r.data, cfg.K)
    else:
        selection = np.sort(np.asarray(selection, dtype=np.int64).reshape(n, -1), axis=-1)
        if selection.shape[1] != cfg.K:
            raise ContractError(f"selection has {selection.shape[1]} heads per token, K={cfg.K}")
    mask = np.zeros((n, cfg.n_routed))
    mask[np.arange(n)[:, None], selection] = 1.0
    routed = mul(probs_r, Tensor(mask))

    if cfg.h_s:
        alpha = softmax(matmul(Xf, transpose(r.W_h)))
        shared = mul(softmax(matmul(Xf, transpose(r.W_s))), alpha[:, 0:1])
        gates = concat([shared, mul(routed, alpha[:, 1:2])], axis=1)
    else:
        alpha = None
        gates = routed

    shared_idx = tuple(range(cfg.h_s))
    activated = [shared_idx + tuple(int(j) + cfg.h_s for j in row) for row in selection]
    return RoutingDecision(gates=gates, activated=activated, alpha=alpha, routed_probs=probs_r,
                           h_s=cfg.h_s, routed_scores=logits_r.data)


def moh_forward(X: Tensor, Xp: Optional[Tensor], w: MHAWeights, d: RoutingDecision) -> Tensor:
    """Gate-weighted sum of per-head outputs H^i W_O^i.

    A head whose gate is zero for every token in ``X`` is skipped entirely.
    """
    Xp = X if Xp is None else Xp
    if d.h != w.h:
        raise ShapeError(f"decision has {d.h} gates per token, layer has {w.h} heads")
    lead = X.shape[:-1]
    if d.n_tokens != int(np.prod(lead)):
        raise ShapeError(f"decision covers {d.n_tokens} tokens, input has {int(np.prod(lead))}")
    gates = d.gates if X.ndim == 2 else reshape(d.gates, lead + (w.h,))
    live = (gates.data != 0).reshape(-1, w.h).any(axis=0)

    out = None
    for i in range(w.h):
        if not live[i]:
            continue
        term = mul(matmul(head_output(X, Xp, w, i), w.W_O_rows[i]), gates[..., i:i + 1])
        out = term if out is None else out + term
    return zeros(lead + (w.d_out,)) if out is None else out


@dataclass
class LoadBalanceStats:
    P: np.ndarray  # mean routed softmax probability per routed head
    f: np.ndarray  # fraction of tokens selecting each routed head


def _selection_counts(selections, n_routed: int, K: Optional[int]) -> np.ndarray:
    counts = np.zeros(n_routed)
    for sel in selections:
        sel = tuple(int(j) for j in np.atleast_1d(sel))
        if K is not None and len(sel) != K:
            raise ContractError(f"selection {sel} has {len(sel)} heads, expected K={K}")
        if len(set(sel)) != len(sel) or any(not 0 <= j < n_routed for j in sel):
            raise ContractError(f"selection {sel} is not a set of routed head indices")
        counts[list(sel)] += 1.0
    return counts


def load_balance_loss(routed_probs: Tensor, selections, K: Optional[int] = None):
    """Sum_i P_i * f_i over routed heads; returns (loss tensor, stats).

    P_i is the token-mean of Softmax(W_r x)_i and carries the gradient;
    f_i is the selection frequency and is a constant.
    """
    selections = list(selections)
    n, n_routed = routed_probs.shape
    if len(selections) != n:
        raise ContractError(f"{len(selections)} selections for {n} tokens")
    if K is None:
        K = len(np.atleast_1d(selections[0]))
    f = _selection_counts(selections, n_routed, K) / n
    P = mean(routed_probs, axis=0)
    loss = sum_all(mul(P, Tensor(f)))
    return loss, LoadBalanceStats(P=P.data.copy(), f=f)


class LoadBalanceMeter:
    """Streams load-balance statistics over batches of tokens."""

    def __init__(self, n_routed: int, K: int):
        self.n_routed = n_routed
        self.K = K
        self.tokens = 0
        self._prob_sum = np.zeros(n_routed)
        self._counts = np.zeros(n_routed)

    def update(self, routed_probs, selections) -> None:
        probs = np.asarray(routed_probs.data if isinstance(routed_probs, Tensor) else routed_probs)
        selections = list(selections)
        if probs.shape != (len(selections), self.n_routed):
            raise ShapeError(f"probabilities {probs.shape} vs {len(selections)} selections over {self.n_routed} heads")
        self._prob_sum += probs.sum(axis=0)
        self._counts += _selection_counts(selections, self.n_routed, self.K)
        self.tokens += len(selections)

    def stats(self) -> LoadBalanceStats:
        if not self.tokens:
            raise ContractError("no tokens seen")
        return LoadBalanceStats(P=self._prob_sum / self.tokens, f=self._counts / self.tokens)

    def loss(self) -> float:
        s = self.stats()
        return float(s.P @ s.f)


def total_loss(task: Tensor, lb: Tensor, beta: float) -> Tensor:
    if beta < 0:
        raise ContractError(f"beta must be >= 0, got {beta}")
    return task + lb * beta


class MoHLayer:
    """Attention weights + router bound to a config."""

    def __init__(self, cfg: MoHConfig, attn: MHAWeights, router: Optional[RouterState] = None):
        if attn.h != cfg.h or attn.d_in != cfg.d_in or attn.d_k != cfg.d_k or attn.d_v != cfg.d_v \
                or attn.d_out != cfg.d_out:
            raise ShapeError("attention weights do not match the layer config")
        needs_router = cfg.router_mode == "two-stage" or cfg.use_alpha
        if needs_router and router is None:
            raise ConfigError(f"router_mode={cfg.router_mode!r} needs router weights")
        if cfg.router_mode == "two-stage":
            router.check(cfg)
        elif cfg.use_alpha and (router.W_h is None or router.W_h.shape != (2, cfg.d_in)):
            raise ShapeError("use_alpha needs a [2 x d_in] W_h")
        self.cfg = cfg
        self.attn = attn
        self.router = router if needs_router else None

    @classmethod
    def init(cls, cfg: MoHConfig, rng: Optional[np.random.Generator] = None) -> "MoHLayer":
        rng = np.random.default_rng() if rng is None else rng
        attn = MHAWeights.init(cfg.h, cfg.d_in, cfg.d_k, cfg.d_v, cfg.d_out, rng=rng)
        router = None
        if cfg.router_mode == "two-stage":
            router = RouterState.init(cfg, rng)
        elif cfg.use_alpha:
            router = RouterState(W_s=None, W_r=None, W_h=Tensor(np.zeros((2, cfg.d_in)), requires_grad=True))
        return cls(cfg, attn, router)

    def route(self, X: Tensor, selection=None) -> RoutingDecision:
        mode = self.cfg.router_mode
        if mode == "dense":
            return RoutingDecision.full(int(np.prod(X.shape[:-1])), self.cfg.h)
        if mode == "two-stage":
            return route_two_stage(X, self.router, self.cfg, selection=selection)
        from .retrofit import parameter_free_route_layer
        return parameter_free_route_layer(self, X, selection=selection)

    def forward(self, X: Tensor, Xp: Optional[Tensor] = None, decision: Optional[RoutingDecision] = None,
                selection=None):
        d = self.route(X, selection=selection) if decision is None else decision
        return moh_forward(X, Xp, self.attn, d), d

    def load_balance(self, d: RoutingDecision):
        """Load-balance loss for a two-stage decision, or None for other modes."""
        if d.routed_probs is None:
            return None
        return load_balance_loss(d.routed_probs, d.routed_selections(), self.cfg.K)

    def parameters(self) -> dict:
        out = {f"attn.{k}": v for k, v in self.attn.parameters().items()}
        if self.router is not None:
            out.update({f"router.{k}": v for k, v in self.router.parameters().items()})
        return out

    @classmethod
    def from_parameters(cls, cfg: MoHConfig, params: dict) -> "MoHLayer":
        attn = MHAWeights.from_parameters({k[5:]: v for k, v in params.items() if k.startswith("attn.")}, cfg.h)
        router = None
        if cfg.router_mode == "two-stage" or cfg.use_alpha:
            router = RouterState(W_s=params.get("router.W_s"), W_r=params.get("router.W_r"),
                                 W_h=params.get("router.W_h"))
        return cls(cfg, attn, router)

"""Mixture-of-Head attention at desk scale."""

from .attention import MHAWeights, multi_head_concat, multi_head_sum, scaled_dot_product_attention
from .layer import (LoadBalanceStats, MoHConfig, MoHLayer, RouterState, RoutingDecision, load_balance_loss,
                    moh_forward, route_two_stage, total_loss)
from .tensor import Tape, Tensor, backward, finite_diff_check

__all__ = [
    "MHAWeights", "multi_head_concat", "multi_head_sum", "scaled_dot_product_attention",
    "LoadBalanceStats", "MoHConfig", "MoHLayer", "RouterState", "RoutingDecision", "load_balance_loss",
    "moh_forward", "route_two_stage", "total_loss",
    "Tape", "Tensor", "backward", "finite_diff_check",
]

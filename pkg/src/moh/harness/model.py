"""Sequence classifier: one attention layer with a residual, mean pooling, linear readout."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..errors import ShapeError
from ..layer import MoHConfig, MoHLayer, total_loss
from ..tensor import Tensor, add, cross_entropy, matmul, mean


class Classifier:
    def __init__(self, layer: MoHLayer, W_c: Tensor, b_c: Tensor):
        cfg = layer.cfg
        if cfg.d_out != cfg.d_in:
            raise ShapeError("the residual connection needs d_out == d_in")
        if W_c.shape[0] != cfg.d_out or b_c.shape != (1, W_c.shape[1]):
            raise ShapeError(f"readout {W_c.shape}/{b_c.shape} does not fit d_out={cfg.d_out}")
        self.layer = layer
        self.W_c = W_c
        self.b_c = b_c

    @classmethod
    def init(cls, cfg: MoHConfig, num_classes: int, rng: Optional[np.random.Generator] = None) -> "Classifier":
        rng = np.random.default_rng() if rng is None else rng
        layer = MoHLayer.init(cfg, rng)
        W_c = Tensor(rng.normal(0.0, 1.0 / math.sqrt(cfg.d_out), (cfg.d_out, num_classes)), requires_grad=True)
        b_c = Tensor(np.zeros((1, num_classes)), requires_grad=True)
        return cls(layer, W_c, b_c)

    @property
    def cfg(self) -> MoHConfig:
        return self.layer.cfg

    @property
    def num_classes(self) -> int:
        return self.W_c.shape[1]

    def forward(self, X, selection=None):
        """Logits [B x C] and the layer's routing decision for a [B x T x D] batch."""
        X = X if isinstance(X, Tensor) else Tensor(X)
        att, d = self.layer.forward(X, selection=selection)
        pooled = mean(add(X, att), axis=1)
        return add(matmul(pooled, self.W_c), self.b_c), d

    def losses(self, X, y, selection=None):
        """(total, task, load-balance or None, logits, decision)."""
        logits, d = self.forward(X, selection=selection)
        task = cross_entropy(logits, y)
        lb = self.layer.load_balance(d)
        if lb is None:
            return task, task, None, logits, d
        return total_loss(task, lb[0], self.cfg.beta), task, lb[0], logits, d

    def parameters(self) -> dict:
        out = dict(self.layer.parameters())
        out["head.W_c"] = self.W_c
        out["head.b_c"] = self.b_c
        return out

    @classmethod
    def from_parameters(cls, cfg: MoHConfig, params: dict) -> "Classifier":
        return cls(MoHLayer.from_parameters(cfg, params), params["head.W_c"], params["head.b_c"])

"""Training loop: SGD with momentum on task loss + beta * load-balance loss."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError, DivergenceError
from ..layer import LoadBalanceMeter, MoHConfig
from ..tensor import Tape
from .checkpoint import Checkpoint
from .model import Classifier
from .tasks import Dataset, TaskSpec, gen_task

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "task_loss", "lb_loss", "total_loss", "accuracy", "head_load")


@dataclass(frozen=True)
class TrainConfig:
    model: MoHConfig
    lr: float = 0.1
    steps: int = 500
    batch_size: int = 32
    momentum: float = 0.9
    clip_norm: Optional[float] = 1.0
    eval_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr >= 0 and 0 <= momentum < 1")
        if self.steps < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("steps, batch_size and eval_interval must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")


@dataclass
class EvalResult:
    task_loss: float
    lb_loss: float
    accuracy: float
    f: Optional[np.ndarray]  # routed-head selection frequencies (two-stage only)


@dataclass
class TrainLog:
    rows: list         # one dict per evaluation, keys LOG_COLUMNS
    step_losses: list  # total minibatch loss at every step


def evaluate(model: Classifier, data: Dataset, batch_size: int = 128) -> EvalResult:
    """Loss, accuracy and head-load statistics over ``data`` (no tape)."""
    cfg = model.cfg
    meter = LoadBalanceMeter(cfg.n_routed, cfg.K) if cfg.router_mode == "two-stage" else None
    nll, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        X = data.X[start:start + batch_size]
        y = data.y[start:start + batch_size]
        logits, d = model.forward(X)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        nll -= logp[np.arange(len(y)), y].sum()
        correct += int((logits.data.argmax(axis=1) == y).sum())
        if meter is not None:
            meter.update(d.routed_probs, d.routed_selections())
    n = len(data)
    if meter is None:
        return EvalResult(task_loss=nll / n, lb_loss=0.0, accuracy=correct / n, f=None)
    return EvalResult(task_loss=nll / n, lb_loss=meter.loss(), accuracy=correct / n, f=meter.stats().f)


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        c = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= c
    return norm


def train(cfg: TrainConfig, task: TaskSpec, log_path=None, data=None):
    """Train a classifier on ``task``; returns (checkpoint, :class:`TrainLog`).

    ``data`` may pass a pre-generated (train, test) pair to skip regeneration.
    """
    if cfg.model.d_in != task.feature_dim:
        raise ConfigError(f"model d_in={cfg.model.d_in} but task feature_dim={task.feature_dim}")
    train_set, _ = gen_task(task) if data is None else data
    rng = np.random.default_rng(cfg.seed)
    model = Classifier.init(cfg.model, task.num_classes, rng)
    params = model.parameters()
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    n = len(train_set)
    order, cursor = rng.permutation(n), 0
    rows, step_losses = [], []

    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size

        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            total = model.losses(train_set.X[idx], train_set.y[idx])[0]
        if not np.isfinite(total.item()):
            raise DivergenceError(step, f"total loss {total.item()}")
        step_losses.append(total.item())
        tape.backward(total)

        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        if cfg.clip_norm is not None:
            gnorm = _clip(grads, cfg.clip_norm)
            if not math.isfinite(gnorm):
                raise DivergenceError(step, "gradient norm is not finite")
        for k, p in params.items():
            v = velocity[k]
            v *= cfg.momentum
            v += grads[k]
            p.data -= cfg.lr * v

        if step % cfg.eval_interval == 0 or step == cfg.steps:
            ev = evaluate(model, train_set)
            if not math.isfinite(ev.task_loss):
                raise DivergenceError(step, "evaluation loss is not finite")
            rows.append({
                "step": step,
                "task_loss": ev.task_loss,
                "lb_loss": ev.lb_loss,
                "total_loss": ev.task_loss + cfg.model.beta * ev.lb_loss,
                "accuracy": ev.accuracy,
                "head_load": "" if ev.f is None else ";".join(f"{x:.6f}" for x in ev.f),
            })
            log.info("step %d task %.4f lb %.4f acc %.3f", step, ev.task_loss, ev.lb_loss, ev.accuracy)

    if log_path is not None:
        write_log(rows, log_path)
    return Checkpoint.from_model(model, step=cfg.steps, rng=rng), TrainLog(rows, step_losses)


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow(row)

"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored; unknown or repeated keys are
errors. Example training config::

    h = 8
    h_s = 2
    K = 4
    d_k = 32
    router_mode = two-stage
    lr = 0.1
    steps = 500
"""

from __future__ import annotations

from typing import Optional

from ..errors import ConfigError
from ..layer import MoHConfig
from .tasks import TaskSpec
from .train import TrainConfig


def _optional_float(s: str) -> Optional[float]:
    return None if s.lower() in ("none", "off", "") else float(s)


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


TASK_KEYS: dict = {
    "kind": str, "feature_dim": int, "seq_len": int, "num_classes": int, "num_clusters": int,
    "n_train": int, "n_test": int, "noise": float, "signal": float, "seed": int,
}

MODEL_KEYS: dict = {
    "h": int, "h_s": int, "K": int, "d_in": int, "d_k": int, "d_v": int, "d_out": int,
    "beta": float, "router_mode": str, "use_alpha": _bool,
}

TRAIN_KEYS: dict = {
    "lr": float, "steps": int, "batch_size": int, "momentum": float, "clip_norm": _optional_float,
    "eval_interval": int, "seed": int,
}


def parse_kv(text: str, schema: dict, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = schema[key](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from e
    return out


def _read(path) -> str:
    with open(path) as fh:
        return fh.read()


def task_from_text(text: str, source: str = "<task>") -> TaskSpec:
    return TaskSpec(**parse_kv(text, TASK_KEYS, source))


def load_task_spec(path) -> TaskSpec:
    return task_from_text(_read(path), str(path))


def train_config_from_text(text: str, d_in: Optional[int] = None, source: str = "<config>") -> TrainConfig:
    """Build a TrainConfig; ``d_in`` (the task's feature dim) fills a missing d_in key."""
    kv = parse_kv(text, {**MODEL_KEYS, **TRAIN_KEYS}, source)
    model_kw = {k: v for k, v in kv.items() if k in MODEL_KEYS}
    train_kw = {k: v for k, v in kv.items() if k in TRAIN_KEYS}
    if "d_in" not in model_kw:
        if d_in is None:
            raise ConfigError(f"{source}: d_in missing and no task given")
        model_kw["d_in"] = d_in
    if "h" not in model_kw:
        raise ConfigError(f"{source}: missing required key 'h'")
    if model_kw.get("router_mode") == "dense":
        model_kw.setdefault("h_s", 0)
        model_kw.setdefault("K", model_kw["h"])
    for k in ("h_s", "K"):
        if k not in model_kw:
            raise ConfigError(f"{source}: missing required key {k!r}")
    return TrainConfig(model=MoHConfig(**model_kw), **train_kw)


def load_train_config(path, d_in: Optional[int] = None) -> TrainConfig:
    return train_config_from_text(_read(path), d_in, str(path))

"""Binary checkpoint container.

Layout (all little-endian)::

    b"MOH1" | u32 version | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 rank | u64 dims[rank] | f64 data[prod(dims)]

Configuration, step and RNG state are stored as ``meta.*`` tensors so the
container stays a flat list of named arrays.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import (CheckpointError, CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError,
                      CheckpointVersionError, ConfigError)
from ..layer import ROUTER_MODES, MoHConfig
from ..tensor import Tensor
from .model import Classifier

MAGIC = b"MOH1"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_CONFIG_FIELDS = ("h", "h_s", "K", "d_in", "d_k", "d_v", "d_out", "beta", "router_mode", "use_alpha")
_MASK32 = (1 << 32) - 1


@dataclass
class Checkpoint:
    config: MoHConfig
    tensors: dict                    # parameter name -> float64 array
    step: int = 0
    rng_state: Optional[dict] = None  # numpy PCG64 bit_generator.state
    version: int = VERSION

    @classmethod
    def from_model(cls, model: Classifier, step: int = 0, rng: Optional[np.random.Generator] = None) -> "Checkpoint":
        tensors = {k: v.data.copy() for k, v in model.parameters().items()}
        return cls(config=model.cfg, tensors=tensors, step=step,
                   rng_state=None if rng is None else rng.bit_generator.state)

    def to_model(self) -> Classifier:
        params = {k: Tensor(v, requires_grad=True) for k, v in self.tensors.items()}
        return Classifier.from_parameters(self.config, params)

    def rng(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.PCG64())
        if self.rng_state is not None:
            gen.bit_generator.state = self.rng_state
        return gen


def _split128(x: int) -> list:
    return [float((x >> (32 * i)) & _MASK32) for i in range(4)]


def _join128(parts) -> int:
    return sum(int(p) << (32 * i) for i, p in enumerate(parts))


def _encode_rng(state: dict) -> np.ndarray:
    if state.get("bit_generator") != "PCG64":
        raise CheckpointError(f"only PCG64 RNG state can be stored, got {state.get('bit_generator')}")
    s = state["state"]
    return np.array(_split128(s["state"]) + _split128(s["inc"]) + [float(state["has_uint32"]),
                                                                  float(state["uinteger"])])


def _decode_rng(v: np.ndarray) -> dict:
    if v.shape != (10,):
        raise CheckpointShapeError(f"meta.rng must have 10 entries, got {v.shape}")
    return {"bit_generator": "PCG64", "state": {"state": _join128(v[:4]), "inc": _join128(v[4:8])},
            "has_uint32": int(v[8]), "uinteger": int(v[9])}


def _encode_config(cfg: MoHConfig) -> np.ndarray:
    vals = [getattr(cfg, f) for f in _CONFIG_FIELDS]
    vals[_CONFIG_FIELDS.index("router_mode")] = ROUTER_MODES.index(cfg.router_mode)
    return np.array(vals, dtype=np.float64)


def _decode_config(v: np.ndarray) -> MoHConfig:
    if v.shape != (len(_CONFIG_FIELDS),):
        raise CheckpointShapeError(f"meta.config must have {len(_CONFIG_FIELDS)} entries, got {v.shape}")
    kw = dict(zip(_CONFIG_FIELDS, v.tolist()))
    for k in ("h", "h_s", "K", "d_in", "d_k", "d_v", "d_out"):
        kw[k] = int(kw[k])
    mode = int(kw["router_mode"])
    if not 0 <= mode < len(ROUTER_MODES):
        raise CheckpointFormatError(f"unknown router mode code {mode}")
    kw["router_mode"] = ROUTER_MODES[mode]
    kw["use_alpha"] = bool(kw["use_alpha"])
    try:
        return MoHConfig(**kw)
    except ConfigError as e:
        raise CheckpointFormatError(f"stored configuration is invalid: {e}") from e


def _expected_shapes(cfg: MoHConfig, num_classes: int) -> dict:
    h = cfg.h
    shapes = {}
    for i in range(h):
        shapes[f"attn.W_Q.{i}"] = (cfg.d_in, cfg.d_k // h)
        shapes[f"attn.W_K.{i}"] = (cfg.d_in, cfg.d_k // h)
        shapes[f"attn.W_V.{i}"] = (cfg.d_in, cfg.d_v // h)
        shapes[f"attn.W_O_rows.{i}"] = (cfg.d_v // h, cfg.d_out)
    if cfg.router_mode == "two-stage":
        shapes["router.W_r"] = (cfg.n_routed, cfg.d_in)
        if cfg.h_s:
            shapes["router.W_s"] = (cfg.h_s, cfg.d_in)
            shapes["router.W_h"] = (2, cfg.d_in)
    elif cfg.use_alpha:
        shapes["router.W_h"] = (2, cfg.d_in)
    shapes["head.W_c"] = (cfg.d_out, num_classes)
    shapes["head.b_c"] = (1, num_classes)
    return shapes


def _check_shapes(cfg: MoHConfig, tensors: dict) -> None:
    if "head.W_c" not in tensors:
        raise CheckpointShapeError("missing tensor head.W_c")
    want = _expected_shapes(cfg, tensors["head.W_c"].shape[-1])
    if set(want) != set(tensors):
        missing = sorted(set(want) - set(tensors))
        extra = sorted(set(tensors) - set(want))
        raise CheckpointShapeError(f"tensor set does not match config: missing {missing}, unexpected {extra}")
    for name, shape in want.items():
        if tensors[name].shape != shape:
            raise CheckpointShapeError(f"{name} has shape {tensors[name].shape}, config needs {shape}")


def encode(c: Checkpoint) -> bytes:
    _check_shapes(c.config, c.tensors)
    records = [("meta.config", _encode_config(c.config)), ("meta.step", np.array([float(c.step)]))]
    if c.rng_state is not None:
        records.append(("meta.rng", _encode_rng(c.rng_state)))
    records += sorted(c.tensors.items())

    out = [_HEADER.pack(MAGIC, c.version, len(records))]
    for name, arr in records:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointFormatError(f"tensor {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"file ends at byte {len(self.buf)} while reading {what} (needs {self.pos + n})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic, version, count = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads version {VERSION}")

    records = {}
    for k in range(count):
        (n,) = struct.unpack("<H", r.take(2, f"name length of record {k}"))
        try:
            name = r.take(n, f"name of record {k}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"record {k} has a non-utf-8 name") from e
        (rank,) = struct.unpack("<B", r.take(1, f"rank of {name}"))
        if rank > 32:
            raise CheckpointFormatError(f"{name} has rank {rank}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        if any(d > len(buf) for d in dims):
            raise CheckpointFormatError(f"{name} has implausible dims {dims}")
        size = math.prod(dims)
        if size > len(buf):
            raise CheckpointTruncatedError(f"{name} claims {size} values, more than the file holds")
        data = np.frombuffer(r.take(8 * size, f"data of {name}"), dtype="<f8").astype(np.float64)
        if name in records:
            raise CheckpointFormatError(f"duplicate tensor {name!r}")
        records[name] = data.reshape(dims)
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after {count} records")

    for req in ("meta.config", "meta.step"):
        if req not in records:
            raise CheckpointFormatError(f"missing {req}")
    for name in ("meta.config", "meta.step", "meta.rng"):
        if name in records and not np.all(np.isfinite(records[name])):
            raise CheckpointFormatError(f"{name} holds non-finite values")
    config = _decode_config(records.pop("meta.config"))
    step = records.pop("meta.step")
    if step.shape != (1,):
        raise CheckpointShapeError(f"meta.step must have one entry, got {step.shape}")
    rng = records.pop("meta.rng", None)
    c = Checkpoint(config=config, tensors=records, step=int(step[0]),
                   rng_state=None if rng is None else _decode_rng(rng), version=version)
    _check_shapes(config, records)
    return c


def save_checkpoint(c: Checkpoint, path) -> None:
    data = encode(c)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())

"""Checkpoint files: text header plus raw little-endian float64 payload.

Layout::

    CAITCKPT
    version 1
    config <n>            followed by n lines of key=value
    index <m>             followed by m lines "name shape offset length"
    payload <bytes>       followed by the raw payload

``shape`` is written as ``3x4``; ``offset`` and ``length`` are byte counts
relative to the first payload byte. The header holds no timestamps, so the
same model and metadata always serialize to identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .blocks import ConfigError, Fixed, LayerScale, strategy_from_str, strategy_to_str
from .cait import CaitConfig, CaitModel, build_model, is_scale_param

MAGIC = b"CAITCKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def _check_key(k: str, v: str) -> None:
    if "\n" in k or "=" in k or "\n" in v:
        raise CheckpointError(f"metadata entry {k!r} cannot be stored on one line")


def dumps(model: CaitModel, meta: Optional[dict] = None, rng_state: Optional[dict] = None) -> bytes:
    items = [(f"model.{k}", v) for k, v in model.config.to_items()]
    items.append(("strategy", strategy_to_str(model.strategy)))
    items.append(("frozen", ",".join(sorted(model.frozen))))
    if rng_state is not None:
        items.append(("rng", json.dumps(rng_state, sort_keys=True)))
    for k, v in (meta or {}).items():
        items.append((f"meta.{k}", str(v)))
    for k, v in items:
        _check_key(k, v)

    index, chunks, offset = [], [], 0
    for name, t in model.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        shape = "x".join(str(s) for s in t.shape)
        index.append(f"{name} {shape} {offset} {len(buf)}")
        chunks.append(buf)
        offset += len(buf)

    head = [MAGIC.decode().rstrip("\n"), f"version {VERSION}", f"config {len(items)}"]
    head += [f"{k}={v}" for k, v in items]
    head.append(f"index {len(index)}")
    head += index
    head.append(f"payload {offset}")
    return ("\n".join(head) + "\n").encode() + b"".join(chunks)


def save_checkpoint(path, model: CaitModel, meta: Optional[dict] = None,
                    rng_state: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model, meta, rng_state))
    return path


def _readline(raw: bytes, pos: int):
    end = raw.find(b"\n", pos)
    if end < 0:
        raise CheckpointError("truncated header")
    return raw[pos:end].decode(), end + 1


def _count(line: str, word: str) -> int:
    parts = line.split()
    if len(parts) != 2 or parts[0] != word:
        raise CheckpointError(f"expected '{word} <n>', got {line!r}")
    return int(parts[1])


def loads(raw: bytes):
    """Parse checkpoint bytes into ``(config items, tensors, payload info)``."""
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = len(MAGIC)
    line, pos = _readline(raw, pos)
    version = _count(line, "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    line, pos = _readline(raw, pos)
    items = {}
    for _ in range(_count(line, "config")):
        line, pos = _readline(raw, pos)
        k, sep, v = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad config line {line!r}")
        items[k] = v
    line, pos = _readline(raw, pos)
    entries = []
    for _ in range(_count(line, "index")):
        line, pos = _readline(raw, pos)
        try:
            name, shape, off, length = line.split()
            entries.append((name, tuple(int(s) for s in shape.split("x")), int(off), int(length)))
        except ValueError:
            raise CheckpointError(f"bad index line {line!r}") from None
    line, pos = _readline(raw, pos)
    total = _count(line, "payload")
    payload = raw[pos:]
    if len(payload) != total:
        raise CheckpointError(f"payload has {len(payload)} bytes, header says {total}")
    tensors = {}
    for name, shape, off, length in entries:
        if off + length > total or length != 8 * int(np.prod(shape)):
            raise CheckpointError(f"record {name!r} does not fit its declared shape {shape}")
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=length // 8, offset=off).reshape(shape).astype(np.float64)
    return items, tensors


def load_checkpoint(path):
    """Rebuild the model stored at ``path``.

    Returns ``(model, meta, rng_state)`` where ``meta`` holds the ``meta.*``
    entries as strings and ``rng_state`` is a bit-generator state dict or None.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    items, tensors = loads(path.read_bytes())
    config = CaitConfig.from_items({k[6:]: v for k, v in items.items() if k.startswith("model.")})
    strategy = strategy_from_str(items.get("strategy", "baseline"))
    if isinstance(strategy, LayerScale) and isinstance(strategy.init, Fixed):
        strategy = LayerScale(Fixed({n: a for n, a in tensors.items() if is_scale_param(n)}))
    model = build_model(config, strategy, seed=0)
    if set(model.params) != set(tensors):
        missing = sorted(set(model.params) ^ set(tensors))
        raise CheckpointError(f"parameter names disagree with the config: {missing[:5]}")
    for name, t in model.params.items():
        if t.shape != tensors[name].shape:
            raise CheckpointError(f"{name}: stored shape {tensors[name].shape} != expected {t.shape}")
        t.data[...] = tensors[name]
    frozen = {n for n in items.get("frozen", "").split(",") if n}
    if frozen != model.frozen:
        raise ConfigError(f"frozen set mismatch: stored {sorted(frozen)} vs rebuilt {sorted(model.frozen)}")
    meta = {k[5:]: v for k, v in items.items() if k.startswith("meta.")}
    rng_state = json.loads(items["rng"]) if "rng" in items else None
    return model, meta, rng_state


def scale_weights(path_or_model) -> dict:
    """LayerScale diagonals (``*.scale1``/``*.scale2``) from a checkpoint or model."""
    if isinstance(path_or_model, CaitModel):
        model = path_or_model
    else:
        model, _, _ = load_checkpoint(path_or_model)
    out = {n: t.data.copy() for n, t in model.params.items() if is_scale_param(n)}
    if not out or not isinstance(model.strategy, LayerScale):
        raise ConfigError("checkpoint holds no LayerScale diagonals")
    return out

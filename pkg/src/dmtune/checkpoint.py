"""Binary checkpoints: versioned header, then named little-endian f64 tensors.

Base and adapter weights are separate files. An adapter file records the
sha256 of the base it was trained against and refuses to load onto anything
else. Round-trips are bit-identical.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .lora import LoraConfig, attach_adapters
from .model import ModelConfig, TransformerLM
from .numerics import Rng

__all__ = [
    "CheckpointError", "base_checksum",
    "save_base", "load_base", "save_adapters", "load_adapters",
]

_MAGIC = b"DMTCKPT\x00"
_VERSION = 1
_DTYPE_F64 = 0


class CheckpointError(ValueError):
    """Malformed checkpoint file or mismatched base weights."""


def base_checksum(model: TransformerLM) -> str:
    """sha256 over (name, raw bytes) of every base parameter, sorted by name."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(b"\x00")
        h.update(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


def _write(path, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header, tensors=[n for n, _ in tensors])
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_F64, data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    try:
        header = json.loads(raw[pos: pos + hlen].decode())
        pos += hlen
        tensors: dict[str, np.ndarray] = {}
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos: pos + nlen].decode()
            pos += nlen
            tag, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            if tag != _DTYPE_F64:
                raise CheckpointError(f"{path}: unknown dtype tag {tag}")
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            tensors[name] = arr.reshape(shape).astype(np.float64)
        if pos != len(raw):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    except (struct.error, ValueError) as exc:  # json/unicode errors included
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if sorted(tensors) != sorted(header.get("tensors", [])):
        raise CheckpointError(f"{path}: tensor list does not match header")
    return header, tensors


# ---- Base weights ----

def save_base(path, model: TransformerLM, meta: dict | None = None) -> None:
    header = {
        "kind": "base",
        "model_config": asdict(model.config),
        "meta": meta or {},
        "checksum": base_checksum(model),
    }
    _write(path, header, [(n, t.data) for n, t in model.params.items()])


def load_base(path) -> tuple[TransformerLM, dict]:
    header, tensors = _read(path)
    if header.get("kind") != "base":
        raise CheckpointError(f"{path}: expected a base checkpoint, got {header.get('kind')!r}")
    config = ModelConfig(**header["model_config"])
    model = TransformerLM(config, Rng(0))
    if sorted(tensors) != sorted(model.params):
        raise CheckpointError(f"{path}: tensor names do not match the declared config")
    for name, arr in tensors.items():
        if arr.shape != model.params[name].data.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, "
                                  f"expected {model.params[name].data.shape}")
        model.params[name].data = arr.copy()
    if base_checksum(model) != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupt")
    return model, header.get("meta", {})


# ---- Adapter weights ----

def save_adapters(path, model: TransformerLM, meta: dict | None = None) -> None:
    if not model.adapters:
        raise CheckpointError("model has no adapters to save")
    ranks = {ad.rank for ad in model.adapters.values()}
    alphas = {ad.alpha for ad in model.adapters.values()}
    header = {
        "kind": "adapters",
        "model_config": asdict(model.config),
        "meta": meta or {},
        "base_checksum": base_checksum(model),
        "lora": {"rank": ranks.pop(), "alpha": alphas.pop(),
                 "targets": list(model.adapters)},
    }
    tensors = []
    for name, ad in model.adapters.items():
        tensors.append((f"{name}.a", ad.a.data))
        tensors.append((f"{name}.b", ad.b.data))
    _write(path, header, tensors)


def load_adapters(path, model: TransformerLM) -> dict:
    """Attach and fill adapters saved against this exact base model."""
    header, tensors = _read(path)
    if header.get("kind") != "adapters":
        raise CheckpointError(f"{path}: expected an adapter checkpoint, "
                              f"got {header.get('kind')!r}")
    if header["base_checksum"] != base_checksum(model):
        raise CheckpointError(f"{path}: adapter file was trained against a different "
                              "base model (checksum mismatch)")
    lora = header["lora"]
    config = LoraConfig(rank=int(lora["rank"]), alpha=float(lora["alpha"]),
                        targets=tuple(lora["targets"]))
    attach_adapters(model, config, Rng(0))
    for name, ad in model.adapters.items():
        for part, tensor in (("a", ad.a), ("b", ad.b)):
            arr = tensors[f"{name}.{part}"]
            if arr.shape != tensor.data.shape:
                raise CheckpointError(f"{path}: adapter tensor {name}.{part} has "
                                      f"shape {arr.shape}, expected {tensor.data.shape}")
            tensor.data = arr.copy()
    return header.get("meta", {})

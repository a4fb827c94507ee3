"""Binary checkpoint format.

Layout::

    b"CXPP"                      magic
    uint32 LE                    format version
    uint32 LE                    metadata length in bytes
    UTF-8 JSON                   config echo, counters, tensor directory
    float32 LE payloads          in directory order

Each directory entry holds ``name``, ``shape`` and ``offset`` (bytes from
the start of the payload section).
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, CorruptCheckpointError, UnsupportedVersionError

MAGIC = b"CXPP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_M_PREFIX = "optimizer.m:"
_V_PREFIX = "optimizer.v:"


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    best_val_loss: Optional[float]
    tensors: dict  # parameters and BN running stats
    optimizer: Optional[dict] = None  # {"t", "lr", "m": {...}, "v": {...}}
    history: dict = field(default_factory=dict)


def snapshot(model, config, epoch, best_val_loss, optimizer=None, history=None):
    tensors = {p.name: p.value.astype(np.float32, copy=True) for p in model.parameters()}
    for name, buf in model.buffers().items():
        tensors[name] = buf.astype(np.float32, copy=True)
    return Checkpoint(
        dict(config), epoch, best_val_loss, tensors,
        optimizer.state_dict() if optimizer is not None else None,
        {k: list(v) for k, v in (history or {}).items()},
    )


def load_into(model, checkpoint):
    """Copy checkpoint tensors into ``model`` in place."""
    params = {p.name: p for p in model.parameters()}
    buffers = model.buffers()
    expected = set(params) | set(buffers)
    got = set(checkpoint.tensors)
    if expected != got:
        missing, extra = sorted(expected - got), sorted(got - expected)
        raise CheckpointError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, value in checkpoint.tensors.items():
        target = params[name].value if name in params else buffers[name]
        if target.shape != value.shape:
            raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {target.shape}")
        target[...] = value
    return model


def save_checkpoint(checkpoint, path):
    entries, chunks, offset = [], [], 0
    named = list(checkpoint.tensors.items())
    opt_meta = None
    if checkpoint.optimizer is not None:
        opt = checkpoint.optimizer
        named += [(_M_PREFIX + k, v) for k, v in opt["m"].items()]
        named += [(_V_PREFIX + k, v) for k, v in opt["v"].items()]
        opt_meta = {"t": int(opt["t"]), "lr": float(opt["lr"])}
    for name, arr in named:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    best = checkpoint.best_val_loss
    meta = {
        "config": checkpoint.config,
        "epoch": int(checkpoint.epoch),
        "best_val_loss": None if best is None or not np.isfinite(best) else float(best),
        "optimizer": opt_meta,
        "history": checkpoint.history,
        "tensors": entries,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptCheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _HEADER.size + meta_len
    if len(data) < start:
        raise CorruptCheckpointError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(data[_HEADER.size : start].decode("utf-8"))
        entries = meta["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata ({exc})") from None
    payload = memoryview(data)[start:]
    tensors = {}
    expected = 0
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if e["offset"] != expected or end > len(payload):
            raise CorruptCheckpointError(f"{path}: truncated or misaligned payload at tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(payload[e["offset"] : end], dtype="<f4").astype(np.float32).reshape(e["shape"])
        expected = end
    if expected != len(payload):
        raise CorruptCheckpointError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    optimizer = None
    if meta.get("optimizer") is not None:
        m = {k[len(_M_PREFIX) :]: tensors.pop(k) for k in list(tensors) if k.startswith(_M_PREFIX)}
        v = {k[len(_V_PREFIX) :]: tensors.pop(k) for k in list(tensors) if k.startswith(_V_PREFIX)}
        optimizer = {"t": meta["optimizer"]["t"], "lr": meta["optimizer"]["lr"], "m": m, "v": v}
    best = meta.get("best_val_loss")
    return Checkpoint(
        meta["config"], meta["epoch"], float("inf") if best is None else best, tensors, optimizer,
        meta.get("history", {}),
    )

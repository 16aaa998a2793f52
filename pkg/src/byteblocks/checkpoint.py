"""Flat binary checkpoints: JSON manifest, raw float payload, checksum.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON header
(format version, free-form meta, tensor manifest with name/shape/dtype/byte
offset), payload of concatenated little-endian float32 tensors, and an
8-byte blake2b checksum of the payload. Everything is parseable with a hex
dump and a JSON reader, and a write -> read round trip reproduces each f32
tensor bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from byteblocks.frontier import FrontierConfig
from byteblocks.model import ModelConfig
from byteblocks.training import TrainState
from byteblocks.autodiff import Tensor

MAGIC = b"BBCK"
VERSION = 1
_DTYPE = "<f4"


class CheckpointError(Exception):
    """Unreadable, inconsistent, or corrupted checkpoint file."""


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Serialize named arrays (stored as little-endian f32) plus JSON meta."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": _DTYPE, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "meta": meta or {}, "tensors": entries}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(_digest(payload))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Parse and verify a checkpoint; returns (tensors, meta)."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header_len = int.from_bytes(blob[4:8], "little")
    header_end = 8 + header_len
    if header_end + 8 > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")

    payload = blob[header_end:-8]
    if _digest(payload) != blob[-8:]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    spans = []
    for entry in header["tensors"]:
        if entry["dtype"] != _DTYPE:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r}")
        size = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        start = entry["offset"]
        if start < 0 or start + size > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} out of bounds")
        spans.append((start, start + size, entry["name"]))
        flat = np.frombuffer(payload, dtype=_DTYPE, count=size // 4, offset=start)
        tensors[entry["name"]] = flat.reshape(entry["shape"]).copy()
    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise CheckpointError(f"{path}: tensors {name_a!r} and {name_b!r} overlap")
    return tensors, header["meta"]


# -- training-state adapters ---------------------------------------------------

_M_PREFIX = "opt.m."
_V_PREFIX = "opt.v."


def save_train_state(path, state: TrainState, config: ModelConfig) -> None:
    """One file holding weights, optimizer moments, clock, and model shape."""
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        tensors[name] = p.data
        tensors[_M_PREFIX + name] = state.m[name]
        tensors[_V_PREFIX + name] = state.v[name]
    meta = {
        "step": state.step,
        "seed": state.seed,
        "adam_t": state.adam_t,
        "model_config": dataclasses.asdict(config),
    }
    write_checkpoint(path, tensors, meta)


def load_train_state(path) -> tuple[TrainState, ModelConfig]:
    tensors, meta = read_checkpoint(path)
    try:
        cfg_dict = dict(meta["model_config"])
        cfg_dict["frontier"] = FrontierConfig(**cfg_dict["frontier"])
        config = ModelConfig(**cfg_dict)
        step, seed, adam_t = meta["step"], meta["seed"], meta["adam_t"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing training metadata ({exc})") from exc

    params: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith(_M_PREFIX):
            m[name[len(_M_PREFIX):]] = arr
        elif name.startswith(_V_PREFIX):
            v[name[len(_V_PREFIX):]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    if set(params) != set(m) or set(params) != set(v):
        raise CheckpointError(f"{path}: weights and optimizer moments disagree")
    return TrainState(params=params, m=m, v=v, adam_t=adam_t,
                      step=step, seed=seed), config

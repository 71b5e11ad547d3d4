"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"IR2N"                 magic
    u32                     format version
    u64                     header length in bytes
    header                  UTF-8 JSON, keys sorted, no whitespace
    payload                 raw tensor bytes, concatenated in table order

The header carries the config snapshot, epoch, RNG state, counting
conventions, free-form metadata and a tensor table whose entries are
``[section, name, dtype, shape, offset, nbytes]``. Sections are ``model``
(parameters and BatchNorm running statistics, named by module path) and
``optim``. Tensors are stored as little-endian IEEE floats / integers, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"IR2N"
VERSION = 1
_SECTIONS = ("model", "optim")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    model: dict[str, np.ndarray]
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict | None = None
    conventions: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def to_bytes(ckpt: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for section in _SECTIONS:
        tensors = getattr(ckpt, section)
        for name in sorted(tensors):
            arr = _le(np.asarray(tensors[name]))
            raw = arr.tobytes()
            table.append([section, name, arr.dtype.str, list(arr.shape), offset, len(raw)])
            chunks.append(raw)
            offset += len(raw)
    header = {
        "config": ckpt.config, "epoch": int(ckpt.epoch), "rng_state": ckpt.rng_state,
        "conventions": ckpt.conventions, "meta": ckpt.meta, "tensors": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(chunks)


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: not an IR2N checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 16:
        raise CheckpointError(f"{source}: truncated header")
    version, head_len = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint format version {version}, this build reads {VERSION}")
    try:
        header = json.loads(raw[16:16 + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header") from exc
    payload = memoryview(raw)[16 + head_len:]
    sections = {s: {} for s in _SECTIONS}
    for section, name, dtype, shape, offset, nbytes in header["tensors"]:
        if section not in sections:
            raise CheckpointError(f"{source}: unknown section {section!r}")
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{source}: tensor {name} runs past the end of the file")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=np.dtype(dtype)).reshape(shape)
        sections[section][name] = arr.copy()
    return Checkpoint(header["config"], sections["model"], sections["optim"], header["epoch"],
                      header["rng_state"], header["conventions"], header["meta"])


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))

"""Single-file binary checkpoints: little-endian, length-prefixed named
tensors, with the config snapshot, epoch counter, and PRNG state."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"RKC1"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    epoch: int
    prng_state: dict
    tensors: dict[str, np.ndarray]


def _write_block(handle, blob: bytes) -> None:
    handle.write(struct.pack("<I", len(blob)))
    handle.write(blob)


def _read_block(handle, path, what) -> bytes:
    header = handle.read(4)
    if len(header) != 4:
        raise ParseError(f"{path}: truncated while reading {what} length")
    (length,) = struct.unpack("<I", header)
    blob = handle.read(length)
    if len(blob) != length:
        raise ParseError(f"{path}: truncated while reading {what}")
    return blob


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<H", VERSION))
        _write_block(handle, checkpoint.config_text.encode("utf-8"))
        handle.write(struct.pack("<I", checkpoint.epoch))
        _write_block(handle, json.dumps(checkpoint.prng_state, sort_keys=True).encode("utf-8"))
        handle.write(struct.pack("<I", len(checkpoint.tensors)))
        for name, data in checkpoint.tensors.items():
            data = np.asarray(data, dtype=np.float64)
            _write_block(handle, name.encode("utf-8"))
            handle.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                handle.write(struct.pack("<I", dim))
            handle.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as handle:
        if handle.read(4) != MAGIC:
            raise ParseError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<H", handle.read(2))
        if version != VERSION:
            raise ParseError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
        config_text = _read_block(handle, path, "config").decode("utf-8")
        (epoch,) = struct.unpack("<I", handle.read(4))
        prng_state = json.loads(_read_block(handle, path, "prng state").decode("utf-8"))
        (count,) = struct.unpack("<I", handle.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_block(handle, path, "tensor name").decode("utf-8")
            raw = handle.read(1)
            if len(raw) != 1:
                raise ParseError(f"{path}: truncated while reading tensor rank")
            (ndim,) = struct.unpack("<B", raw)
            dims = []
            for _ in range(ndim):
                dims.append(struct.unpack("<I", handle.read(4))[0])
            size = int(np.prod(dims)) if dims else 1
            blob = handle.read(8 * size)
            if len(blob) != 8 * size:
                raise ParseError(f"{path}: truncated while reading tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f8").reshape(dims).copy()
    return Checkpoint(config_text=config_text, epoch=epoch, prng_state=prng_state, tensors=tensors)

"""Versioned checkpoint container.

Layout: the magic line ``SPLLM-CKPT``, a format version line, one JSON header
line (config, vocabulary flag, tensor table with name/shape/frozen/offset,
free-form metadata), then the concatenated little-endian float64 tensor data.
Tensors are written in sorted name order so identical states give identical
bytes.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .model import ModelConfig, ModelState
from .tokenizer import Tokenizer

MAGIC = b"SPLLM-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(state: ModelState, meta: dict | None = None) -> bytes:
    table = []
    blobs = []
    offset = 0
    for name in sorted(state.params):
        arr = np.ascontiguousarray(state.params[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "frozen": name not in state.trainable, "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": state.config.to_dict(),
        "expanded_vocab": state.tokenizer.expanded,
        "tensors": table,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + f"{VERSION}\n".encode() + head + b"\n" + b"".join(blobs)


def save_checkpoint(path: str | os.PathLike, state: ModelState, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state, meta))


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelState, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    rest = raw[len(MAGIC) :]
    version_line, rest = rest.split(b"\n", 1)
    if int(version_line) != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version_line.decode()}")
    head, data = rest.split(b"\n", 1)
    header = json.loads(head)
    params, trainable = {}, set()
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"]).copy()
        params[t["name"]] = arr
        if not t["frozen"]:
            trainable.add(t["name"])
    state = ModelState(
        ModelConfig.from_dict(header["config"]), params, trainable, Tokenizer(expanded=header["expanded_vocab"])
    )
    return state, header["meta"]

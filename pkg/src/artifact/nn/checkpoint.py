"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"PIMLCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H in bytes
    20      H     UTF-8 JSON header
    20+H    ...   tensor payload

The JSON header holds ``format_version``, ``architecture``, ``seed``,
``loss_config``, a free-form ``meta`` object and ``tensors``: an ordered list
of ``{"name", "shape", "offset", "nbytes"}`` where ``offset`` is relative to
the start of the payload. Each tensor is stored as C-order little-endian
IEEE-754 float64 (``<f8``), so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams

MAGIC = b"PIMLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    architecture: dict = field(default_factory=dict)
    seed: int | None = None
    loss_config: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, params: ModelParams, seed=None, loss_config=None, meta=None,
                   extra_tensors: dict[str, np.ndarray] | None = None) -> "Checkpoint":
        tensors = {k: v.copy() for k, v in params.named_arrays().items()}
        for k, v in (extra_tensors or {}).items():
            tensors[k] = np.asarray(v, dtype=np.float64).copy()
        return cls(tensors, params.architecture(), seed, loss_config, dict(meta or {}))

    def model(self) -> ModelParams:
        arrays = {k: v for k, v in self.tensors.items() if k.startswith(("extractor.", "head."))}
        return ModelParams.from_named(arrays, self.architecture.get("activation_kind"))


def dumps(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": ckpt.architecture,
        "seed": ckpt.seed,
        "loss_config": ckpt.loss_config,
        "meta": ckpt.meta,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def loads(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    payload = memoryview(blob)[20 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
    return Checkpoint(tensors, header["architecture"], header["seed"], header["loss_config"], header["meta"])


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))
    return path


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())

"""Versioned binary checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 manifest length,
the UTF-8 JSON manifest, then the raw little-endian tensor bytes in manifest
order.  Serialization is canonical, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MMFSODCK"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    step: int = 0
    vocab: list[str] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr)
            data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="),
                            "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        manifest = {"format": "mmfsod-checkpoint", "version": VERSION, "step": self.step,
                    "config": self.config, "vocab": self.vocab, "tensors": entries}
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _HEADER.size:
            raise CheckpointError("file too short for a checkpoint header")
        magic, version, n = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        manifest = json.loads(raw[_HEADER.size:_HEADER.size + n])
        base = _HEADER.size + n
        tensors = {}
        for e in manifest["tensors"]:
            start = base + e["offset"]
            buf = raw[start:start + e["nbytes"]]
            if len(buf) != e["nbytes"]:
                raise CheckpointError(f"truncated tensor {e['name']}")
            dtype = np.dtype(e["dtype"]).newbyteorder("<")
            tensors[e["name"]] = np.frombuffer(buf, dtype=dtype).reshape(e["shape"]).copy()
        return cls(tensors, manifest["config"], manifest["step"], manifest["vocab"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

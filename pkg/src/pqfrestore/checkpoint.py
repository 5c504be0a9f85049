"""Checkpoint files: named parameter arrays plus configuration.

Layout (all integers little-endian)::

    8 bytes   magic b"PQFRCKPT"
    uint32    format version
    uint64    header length in bytes
    header    UTF-8 JSON: {"format_version", "kind", "config", "meta",
                           "entries": [{"name", "shape", "offset"}, ...]}
    payload   concatenated little-endian float32 arrays; ``offset`` is the
              byte offset of each entry from the start of the payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"PQFRCKPT"
FORMAT_VERSION = 1
KINDS = ("stage1", "stage2", "denoiser")


def component_of(name: str) -> str:
    """Top-level component a parameter belongs to (``"R3.block0.conv1.weight"`` -> ``"R3"``)."""
    return name.split(".", 1)[0]


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")

    def components(self) -> dict[str, np.ndarray]:
        """Flat parameter vector per component, in name order."""
        groups: dict[str, list] = {}
        for name in sorted(self.params):
            groups.setdefault(component_of(name), []).append(self.params[name].ravel())
        return {k: np.concatenate(v) for k, v in groups.items()}

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}

    @classmethod
    def from_module(cls, kind: str, config: dict, module: torch.nn.Module, meta: dict | None = None):
        params = {k: v.detach().cpu().numpy().astype(np.float32, copy=True) for k, v in module.state_dict().items()}
        return cls(kind, dict(config), params, dict(meta or {}))

    def save(self, path) -> Path:
        path = Path(path)
        entries = []
        offset = 0
        blobs = []
        for name in sorted(self.params):
            arr = np.asarray(self.params[name], dtype="<f4")  # tobytes() is C-order; keeps 0-d shapes
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "kind": self.kind,
                "config": self.config,
                "meta": self.meta,
                "entries": entries,
            },
            sort_keys=True,
        ).encode("utf-8")
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
            fh.write(header)
            for b in blobs:
                fh.write(b)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", data[8:20])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
        payload = memoryview(data)[20 + hlen :]
        params = {}
        for e in header["entries"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
            params[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
        return cls(header["kind"], header["config"], params, header.get("meta", {}))

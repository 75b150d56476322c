"""Checkpoint file: magic, u32 manifest length, JSON manifest, raw f32 arrays.

Arrays are little-endian float32 written back to back in the order the
manifest lists them. ``save(load(path))`` reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .model import ModelConfig, Params, check_params, param_shapes

MAGIC = b"EHRAUGCK"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    seed: int = 0
    step: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        check_params(self.params, self.config)
        names = list(param_shapes(self.config))
        manifest = {
            "version": FORMAT_VERSION,
            "config": self.config.to_json(),
            "seed": self.seed,
            "step": self.step,
            "arrays": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
            "extra": self.extra,
        }
        header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        for n in names:
            buf.write(np.ascontiguousarray(self.params[n], dtype=_F32).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        if data[: len(MAGIC)] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        off = len(MAGIC)
        (hlen,) = struct.unpack_from("<I", data, off)
        off += 4
        manifest = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        if manifest.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        params = {}
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype=_F32, count=count, offset=off)
            params[entry["name"]] = arr.reshape(shape).astype(np.float32)
            off += count * _F32.itemsize
        if off != len(data):
            raise ValueError("trailing bytes after checkpoint arrays")
        cfg = ModelConfig.from_json(manifest["config"])
        check_params(params, cfg)
        return cls(cfg, params, manifest["seed"], manifest["step"], manifest.get("extra", {}))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

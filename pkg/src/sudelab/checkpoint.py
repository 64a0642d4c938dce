"""Binary checkpoints.

Layout::

    b"SUDE1" | u32 LE manifest length | manifest (UTF-8 JSON) | parameter blob

The blob holds every tensor as little-endian float32, row-major, at the byte
offset recorded in the manifest.  Loading widens back to float64, so a
round trip perturbs weights by at most float32 rounding.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SUDE1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                            "nbytes": arr.nbytes})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        manifest = {"format": "SUDE1", "config_hash": self.config_hash, "dtype": "<f4",
                    "meta": self.meta, "params": entries}
        head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a SUDE1 checkpoint (bad magic)")
        pos = len(MAGIC)
        if len(data) < pos + 4:
            raise CheckpointError("truncated header")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        try:
            manifest = json.loads(data[pos:pos + n].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt manifest: {exc}") from None
        blob = memoryview(data)[pos + n:]
        params = {}
        for e in manifest["params"]:
            end = e["offset"] + e["nbytes"]
            if end > len(blob):
                raise CheckpointError(f"blob too short for parameter {e['name']}")
            arr = np.frombuffer(blob[e["offset"]:end], dtype="<f4")
            params[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
        return cls(params, manifest.get("config_hash", ""), manifest.get("meta", {}))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def checkpoint_of(model, config_hash: str = "", **meta) -> Checkpoint:
    params = model.state()
    if model.pretrained is not None:
        params.update({"pretrained/" + k: v for k, v in model.pretrained.items()})
    meta = {"schedule": model.schedule.to_dict(), "dims": model.dims.to_dict(),
            "vocab": model.vocab.to_dict(), **meta}
    return Checkpoint(params, config_hash, meta)


def restore(model, ckpt: Checkpoint) -> None:
    """Load weights (and the pretrained snapshot, if stored) into ``model``."""
    live = {k: v for k, v in ckpt.params.items() if not k.startswith("pretrained/")}
    model.load_state(live)
    snap = {k[len("pretrained/"):]: v for k, v in ckpt.params.items() if k.startswith("pretrained/")}
    model.pretrained = snap or None

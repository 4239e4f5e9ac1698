"""Binary checkpoint format.

Layout: 8-byte magic, uint32 format version, uint64 header length, a
sorted-key JSON header, zero padding to an 8-byte boundary, then every array
as little-endian float64 in header order. The header records each array's
name, shape and byte offset. Saving what was loaded reproduces the file
byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"S3DPCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: dict              # name -> float64 array, in model order
    normalizer: dict
    epoch: int
    rng_state: dict
    optimizer: dict = field(default_factory=dict)   # {"t": int, "m": {...}, "v": {...}}
    history: list = field(default_factory=list)     # per-epoch mean loss

    def to_bytes(self) -> bytes:
        arrays = [("param", k, v) for k, v in self.params.items()]
        if self.optimizer:
            arrays += [("adam_m", k, v) for k, v in self.optimizer["m"].items()]
            arrays += [("adam_v", k, v) for k, v in self.optimizer["v"].items()]
        index, offset, blobs = [], 0, []
        for group, name, arr in arrays:
            a = np.ascontiguousarray(arr, dtype="<f8")
            index.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
        header = {"version": VERSION, "config": self.config, "normalizer": self.normalizer,
                  "epoch": self.epoch, "rng_state": self.rng_state, "history": self.history,
                  "adam_t": self.optimizer.get("t", 0) if self.optimizer else None,
                  "arrays": index}
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        pad = (-(len(MAGIC) + 12 + len(hb))) % 8
        return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"\0" * pad + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:len(MAGIC)] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        start = len(MAGIC) + 12
        header = json.loads(data[start:start + hlen])
        base = start + hlen + (-(start + hlen)) % 8
        groups = {"param": {}, "adam_m": {}, "adam_v": {}}
        for e in header["arrays"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            a = np.frombuffer(data, dtype="<f8", count=n, offset=base + e["offset"])
            groups[e["group"]][e["name"]] = a.reshape(e["shape"]).astype(np.float64)
        opt = {}
        if header["adam_t"] is not None:
            opt = {"t": header["adam_t"], "m": groups["adam_m"], "v": groups["adam_v"]}
        return cls(header["config"], groups["param"], header["normalizer"], header["epoch"],
                   header["rng_state"], opt, header["history"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"epoch_{epoch:05d}.ckpt"


def list_checkpoints(out_dir) -> list:
    return sorted((Path(out_dir) / "checkpoints").glob("epoch_*.ckpt"))

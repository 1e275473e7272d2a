"""Checkpoint container.

Layout (all integers little-endian)::

    b"MNCA" | u32 version | u32 header length | JSON header | float32 arrays | u32 CRC32

The header records the config, metadata, optimizer step, RNG state, and for
each array its name, shape, and byte offset relative to the start of the
array section. The CRC covers every byte before it.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .optim import AdamState

MAGIC = b"MNCA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _restore(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore(v) for v in obj]
    return obj


@dataclass
class Checkpoint:
    config: dict
    weights: dict[str, np.ndarray]
    adam: AdamState
    rng_state: dict
    bank_seed: int = 0
    metadata: dict = field(default_factory=dict)
    pool: np.ndarray | None = None
    version: int = VERSION

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"weights/{k}", v) for k, v in self.weights.items()]
        out += [(f"adam_m/{k}", v) for k, v in self.adam.m.items()]
        out += [(f"adam_v/{k}", v) for k, v in self.adam.v.items()]
        if self.pool is not None:
            out.append(("pool", self.pool))
        return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in ckpt.arrays():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config,
        "metadata": ckpt.metadata,
        "adam_step": ckpt.adam.step,
        "rng_state": _jsonable(ckpt.rng_state),
        "bank_seed": ckpt.bank_seed,
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", ckpt.version, len(hbytes)) + hbytes + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch: file is corrupted or truncated")
    version, hlen = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    if 12 + hlen > len(body):
        raise CheckpointError("truncated header")
    header = json.loads(body[12:12 + hlen].decode("utf-8"))
    data = body[12 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(data):
            raise CheckpointError(f"array {e['name']} extends past end of file")
        arr = np.frombuffer(data[e["offset"]:end], dtype="<f4").astype(np.float32)
        arrays[e["name"]] = arr.reshape(e["shape"])

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    return Checkpoint(
        config=header["config"],
        weights=group("weights/"),
        adam=AdamState(group("adam_m/"), group("adam_v/"), int(header["adam_step"])),
        rng_state=_restore(header["rng_state"]),
        bank_seed=int(header["bank_seed"]),
        metadata=header["metadata"],
        pool=arrays.get("pool"),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PBLB"                  magic
    uint32                   format version
    uint32                   header length N
    N bytes                  UTF-8 JSON header: config, metadata, manifest
    payload                  float32 arrays, little-endian, back to back

The manifest lists ``[name, shape, byte_offset]`` with offsets relative to the
start of the payload. Arrays are written in sorted-name order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"PBLB"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    params: dict[str, np.ndarray]
    config: dict[str, Any]
    seeds: dict[str, int] = field(default_factory=dict)
    step: int = 0
    meta: dict[str, Any] = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name])
        if arr.dtype != np.float32:
            if not np.issubdtype(arr.dtype, np.floating):
                raise CheckpointError(f"{name}: non-float array")
            arr = arr.astype(np.float32)
        raw = arr.astype("<f4", copy=False).tobytes()
        manifest.append([name, list(arr.shape), offset])
        chunks.append(raw)
        offset += len(raw)
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "seeds": ckpt.seeds,
        "step": ckpt.step,
        "meta": ckpt.meta,
        "manifest": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    payload = memoryview(blob)[12 + hlen:]
    params = {}
    for name, shape, off in header["manifest"]:
        n = int(np.prod(shape)) if shape else 1
        end = off + 4 * n
        if end > len(payload):
            raise CheckpointError(f"{name}: payload truncated")
        params[name] = np.frombuffer(payload[off:end], dtype="<f4").astype(np.float32).reshape(shape)
    return Checkpoint(
        kind=header["kind"],
        params=params,
        config=header["config"],
        seeds=header.get("seeds", {}),
        step=header.get("step", 0),
        meta=header.get("meta", {}),
    )


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def params_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return set(a) == set(b) and all(
        a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
    )

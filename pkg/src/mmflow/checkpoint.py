"""Binary checkpoints.

Layout::

    8 bytes   magic  b"MMFLOWCK"
    4 bytes   format version, little-endian uint32
    8 bytes   header length, little-endian uint64
    header    canonical JSON (sorted keys, no whitespace), UTF-8
    payload   little-endian float32 blobs, parameters then EMA shadow

Each directory entry records ``name``, ``shape`` and byte ``offset`` into
the payload. Parameters and EMA entries are written in sorted-name order, so
saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError

MAGIC = b"MMFLOWCK"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ConfigError):
    pass


@dataclass
class Checkpoint:
    arch: dict
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    step: int = 0
    config_digest: str = ""
    meta: dict[str, Any] = field(default_factory=dict)


def _directory(tensors: Mapping[str, np.ndarray], start: int) -> tuple[list[dict], list[bytes], int]:
    entries, blobs, offset = [], [], start
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_LE_F32)
        blob = arr.tobytes()
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs, offset


def to_bytes(ckpt: Checkpoint) -> bytes:
    params, p_blobs, end = _directory(ckpt.params, 0)
    ema, e_blobs = None, []
    if ckpt.ema is not None:
        if set(ckpt.ema) != set(ckpt.params):
            raise CheckpointError("EMA shadow must cover exactly the model parameters")
        ema, e_blobs, end = _directory(ckpt.ema, end)
    header = {
        "arch": ckpt.arch,
        "config_digest": ckpt.config_digest,
        "ema": ema,
        "meta": ckpt.meta,
        "payload_bytes": end,
        "step": int(ckpt.step),
        "tensors": params,
        "version": VERSION,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes] + p_blobs + e_blobs)


def _read_dir(entries, payload: memoryview, what: str) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = int(e["offset"])
        hi = lo + 4 * count
        if lo < 0 or hi > len(payload):
            raise CheckpointError(f"{what} tensor {e['name']} [{lo}, {hi}) lies outside the {len(payload)}-byte payload")
        out[e["name"]] = np.frombuffer(payload[lo:hi], dtype=_LE_F32).astype(np.float32).reshape(shape)
    return out


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if 20 + hlen > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    payload = memoryview(data)[20 + hlen:]
    if header.get("payload_bytes") != len(payload):
        raise CheckpointError(f"payload has {len(payload)} bytes, header says {header.get('payload_bytes')}")
    params = _read_dir(header["tensors"], payload, "parameter")
    ema = None if header["ema"] is None else _read_dir(header["ema"], payload, "EMA")
    return Checkpoint(header["arch"], params, ema, header["step"], header["config_digest"], header["meta"])


def save(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(ckpt))


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            return from_bytes(f.read())
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None

"""Network checkpoint files ("UCAP").

Layout::

    b"UCAP" | u32 LE version | u32 LE metadata length | UTF-8 JSON metadata | payload

The metadata holds the network config, free-form extras and a tensor
manifest of ``{name, shape, offset}`` entries; ``offset`` is the byte offset
of each little-endian float32 tensor inside the payload.
"""
from __future__ import annotations

import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .network import NetworkConfig, UCapsNet

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "load_network",
           "FORMAT_VERSION"]

MAGIC = b"UCAP"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: Dict[str, np.ndarray], config: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Write ``state`` (name -> array) as float32 with a JSON manifest."""
    manifest, offset = [], 0
    for name in sorted(state):
        arr = np.asarray(state[name])
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * _F32.itemsize
    meta = json.dumps({"config": config, "extra": extra or {}, "tensors": manifest},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
        fh.write(meta)
        for name in sorted(state):
            fh.write(np.ascontiguousarray(state[name], dtype=_F32).tobytes())


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Return ``(state, metadata)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a UCAP checkpoint (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: metadata is not valid JSON: {exc}") from None
    payload = memoryview(raw)[12 + mlen:]
    state = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + count * _F32.itemsize > len(payload):
            raise CheckpointError(f"{path}: payload truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=_F32, count=count, offset=start)
        state[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return state, meta


def load_network(path) -> Tuple[UCapsNet, dict]:
    """Rebuild the network stored in a checkpoint, in eval mode."""
    state, meta = load_checkpoint(path)
    if not meta.get("config"):
        raise CheckpointError(f"{path}: checkpoint carries no network config")
    net = UCapsNet(NetworkConfig.from_dict(meta["config"]))
    net.load_state_dict(state)
    return net.eval(), meta

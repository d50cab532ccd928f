"""Single-file volume storage ("VVOL"), intensity normalization and dataset manifests.

Layout of a VVOL file::

    b"VVOL" | u32 LE header length | UTF-8 JSON {shape, dtype, spacing} | payload

The payload is the raw little-endian array in C order (last axis fastest).
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

__all__ = [
    "Volume",
    "VolumeFormatError",
    "BadMagicError",
    "EmptyHeaderError",
    "TruncatedPayloadError",
    "UnknownDtypeError",
    "read_volume",
    "write_volume",
    "normalize",
    "ManifestEntry",
    "read_manifest",
    "write_manifest",
]

MAGIC = b"VVOL"
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Base class for malformed VVOL files."""


class BadMagicError(VolumeFormatError):
    pass


class EmptyHeaderError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class UnknownDtypeError(VolumeFormatError):
    pass


def _dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, dt in DTYPES.items():
        if dt == dtype.newbyteorder("<") or dt == dtype:
            return name
    raise UnknownDtypeError(f"unsupported volume dtype {dtype}; use float32 images or uint8 labels")


@dataclass
class Volume:
    """A 3D array with voxel spacing in millimetres."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volumes are 3D, got shape {data.shape}")
        _dtype_name(data.dtype)
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ValueError("spacing needs three entries")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _dtype_name(self.data.dtype)

    @property
    def is_label(self) -> bool:
        return self.dtype == "u8"

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


def write_volume(path, volume: Volume) -> None:
    header = json.dumps({
        "shape": list(volume.shape),
        "dtype": volume.dtype,
        "spacing": list(volume.spacing),
    }).encode("utf-8")
    payload = np.ascontiguousarray(volume.data, dtype=DTYPES[volume.dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a VVOL file (magic {raw[:4]!r})")
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: file ends inside the header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if hlen == 0:
        raise EmptyHeaderError(f"{path}: empty header")
    if len(raw) < 8 + hlen:
        raise TruncatedPayloadError(f"{path}: file ends inside the header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: header is not valid JSON: {exc}") from None
    name = header.get("dtype")
    if name not in DTYPES:
        raise UnknownDtypeError(f"{path}: unknown dtype {name!r}")
    shape = tuple(int(s) for s in header["shape"])
    dtype = DTYPES[name]
    nbytes = int(np.prod(shape)) * dtype.itemsize
    payload = raw[8 + hlen:]
    if len(payload) < nbytes:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header promises {nbytes}")
    data = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape))).reshape(shape)
    return Volume(data.astype(dtype.newbyteorder("="), copy=True),
                  tuple(header.get("spacing", (1.0, 1.0, 1.0))))


def normalize(volume: Volume) -> Volume:
    """Min-max rescale an image to [0, 1]; constant volumes become all zeros."""
    if volume.is_label:
        raise ValueError("normalize expects an image volume, got labels")
    x = volume.data.astype(np.float32)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return volume.with_data(np.zeros_like(x))
    return volume.with_data(((x - lo) / (hi - lo)).astype(np.float32))


@dataclass
class ManifestEntry:
    image_path: str
    label_path: str
    split: str = "train"


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        json.dump([e.__dict__ for e in entries], fh, indent=2)


def read_manifest(path) -> List[ManifestEntry]:
    """Load a manifest; relative paths resolve against the manifest's directory."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for item in data:
        extra = set(item) - {"image_path", "label_path", "split"}
        if extra:
            raise ValueError(f"{path}: unknown manifest keys {sorted(extra)}")
        entry = ManifestEntry(**item)
        entry.image_path = os.path.join(base, entry.image_path)
        entry.label_path = os.path.join(base, entry.label_path)
        out.append(entry)
    return out

"""Single-file weight container: JSON manifest plus raw float32 payload.

Layout: 5-byte magic ``ACFD\\0``, an 8-byte little-endian header length, the
UTF-8 JSON header, then the payload blob. The header carries the format
version, the fused flag, the structural config, and one entry per parameter
with dims and byte offset into the payload. Entry order and canonical JSON
make the byte layout deterministic: the same model always serializes to the
same bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .model import DetectorModel, ModelConfig, model_from_arrays, named_arrays

MAGIC = b"ACFD\0"
FORMAT_VERSION = 1
FILE_EXTENSION = ".acfd"


class ContainerFormatError(ValueError):
    """Bad magic or unsupported version."""


class ContainerCorruptionError(ValueError):
    """Manifest and payload disagree."""


def save(model: DetectorModel) -> bytes:
    arrays = named_arrays(model)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dims": list(arr.shape),
                        "offset": offset, "size": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "fused": model.fused,
        "config": model.config.to_dict(),
        "entries": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(header_bytes)),
                     header_bytes, *chunks])


def load(blob: bytes) -> DetectorModel:
    if blob[:len(MAGIC)] != MAGIC:
        raise ContainerFormatError("bad magic; not a weight container")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise ContainerCorruptionError("truncated header length")
    (header_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + header_len:
        raise ContainerCorruptionError("truncated header")
    try:
        header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerCorruptionError(f"unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerFormatError(
            f"unsupported format version {header.get('format_version')}")
    payload = blob[pos + header_len:]
    fused = bool(header["fused"])

    arrays: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        name, dims = entry["name"], tuple(entry["dims"])
        offset, size = entry["offset"], entry["size"]
        if int(np.prod(dims)) * 4 != size:
            raise ContainerCorruptionError(f"entry {name}: dims {dims} != size {size}")
        if offset < 0 or offset + size > len(payload):
            raise ContainerCorruptionError(f"entry {name}: payload out of bounds")
        if fused and (".bn." in name or ".square." in name
                      or ".horizontal." in name or ".vertical." in name):
            raise ContainerCorruptionError(
                f"fused container carries unfused entry {name}")
        arrays[name] = np.frombuffer(
            payload, dtype="<f4", count=int(np.prod(dims)), offset=offset
        ).reshape(dims).copy()

    config = ModelConfig.from_dict(header["config"])
    return model_from_arrays(config, fused, arrays)


def save_file(model: DetectorModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save(model))


def load_file(path) -> DetectorModel:
    with open(path, "rb") as fh:
        return load(fh.read())


def is_fused_file(path) -> bool:
    """Peek at the fused flag without materializing the model."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if head[:len(MAGIC)] != MAGIC:
            raise ContainerFormatError("bad magic; not a weight container")
        (header_len,) = struct.unpack("<Q", head[len(MAGIC):])
        header = json.loads(fh.read(header_len).decode("utf-8"))
    return bool(header["fused"])

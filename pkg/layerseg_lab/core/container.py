"""The "LMN1" tensor container.

Layout: the 4 magic bytes ``LMN1``, a little-endian uint32 header length, a
UTF-8 JSON header listing tensor names and shapes (plus free-form metadata),
then the raw little-endian float32 payloads in header order.
"""
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from ..errors import ContainerError

MAGIC = b"LMN1"
VERSION = 1
_DTYPE = np.dtype("<f4")
_LEN = struct.Struct("<I")


def encode(tensors: Dict[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    entries = []
    payloads = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = {
        "version": VERSION,
        "byte_order": "little",
        "dtype": "float32",
        "tensors": entries,
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, _LEN.pack(len(header_bytes)), header_bytes, *payloads])


def decode(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if len(blob) < len(MAGIC) + _LEN.size:
        raise ContainerError("file too short for an LMN1 header", len(blob))
    if blob[:4] != MAGIC:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    (header_len,) = _LEN.unpack_from(blob, 4)
    offset = 4 + _LEN.size
    if offset + header_len > len(blob):
        raise ContainerError(f"header of {header_len} bytes is truncated", len(blob))
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupted header: {e}", offset) from e
    if header.get("version") != VERSION:
        raise ContainerError(f"unsupported container version {header.get('version')!r}", offset)
    if header.get("dtype") != "float32" or header.get("byte_order") != "little":
        raise ContainerError("only little-endian float32 payloads are supported", offset)
    offset += header_len

    tensors: Dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(blob):
            raise ContainerError(f"payload of {entry['name']!r} is truncated", offset)
        tensors[entry["name"]] = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise ContainerError(f"{len(blob) - offset} trailing bytes after the last payload", offset)
    return tensors, header.get("metadata", {})


def save(path: Union[str, Path], tensors: Dict[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(encode(tensors, metadata))
    except OSError as e:
        raise ContainerError(f"cannot write {path}: {e}") from e


def load(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ContainerError(f"cannot read {path}: {e}") from e
    try:
        return decode(blob)
    except ContainerError as e:
        wrapped = ContainerError(f"{path}: {e}")
        wrapped.offset = e.offset
        raise wrapped from e

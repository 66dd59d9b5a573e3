"""Binary container of named arrays.

Layout::

    b"DINOYPK1"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON, sorted keys
    payload                          raw little-endian array bytes, concatenated

The manifest lists every entry with its dtype, shape, byte offset, byte length
and SHA-256 digest, plus a free-form ``meta`` dictionary. Writing the same
arrays and metadata always yields the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"DINOYPK1"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = _le(np.asarray(arrays[name]))
        raw = arr.tobytes()
        entries[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": sha256_bytes(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "entries": entries,
        "meta": dict(meta or {}),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode(data: bytes, verify: bool = True) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if data[:8] != MAGIC:
        raise ContainerError("not a dinoy container (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + n].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported format_version {manifest.get('format_version')}")
    base = 16 + n
    arrays = {}
    for name, e in manifest["entries"].items():
        raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        if verify and sha256_bytes(raw) != e["sha256"]:
            raise ContainerError(f"digest mismatch for entry {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> str:
    """Write a container atomically and return the SHA-256 of the file bytes."""
    data = encode(arrays, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return sha256_bytes(data)


def load(path: str | os.PathLike, verify: bool = True) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode(Path(path).read_bytes(), verify=verify)


def read_manifest(path: str | os.PathLike) -> dict[str, Any]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ContainerError("not a dinoy container (bad magic)")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))

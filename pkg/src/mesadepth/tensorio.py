"""Single-file container for named float32 tensors with a JSON header.

Layout: 8-byte magic, u32 header length, canonical JSON header, then raw
little-endian float32 payloads concatenated in the header's name order.
Canonical JSON (sorted keys, fixed separators) makes save -> load -> save
byte-stable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MESATNSR"


class ContainerError(ValueError):
    """Corrupt or inconsistent tensor container."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def file_sha256(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_prefix_free(names) -> None:
    """Reject dotted names where one is an ancestor path of another."""
    names = sorted(names)
    for a, b in zip(names, names[1:]):
        if b.startswith(a + "."):
            raise ContainerError(f"parameter names not prefix-free: {a!r} vs {b!r}")
        if a == b:
            raise ContainerError(f"duplicate parameter name {a!r}")


def write_tensors(path: Path | str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    check_prefix_free(tensors.keys())
    names = sorted(tensors.keys())
    arrays = {n: np.ascontiguousarray(tensors[n], dtype="<f4") for n in names}
    header = {
        "meta": meta,
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    header_bytes = canonical_json(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for n in names:
            f.write(arrays[n].tobytes())


def read_tensors(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not a tensor container")
    (header_len,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
        entries = header["tensors"]
        meta = header["meta"]
    except (ValueError, KeyError) as e:
        raise ContainerError(f"{path}: corrupt header ({e})") from e
    offset = start + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(data):
            raise ContainerError(f"{path}: truncated payload at {entry['name']!r}")
        tensors[entry["name"]] = (
            np.frombuffer(data[offset : offset + nbytes], dtype="<f4").reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(data):
        raise ContainerError(f"{path}: trailing bytes after payload")
    return tensors, meta

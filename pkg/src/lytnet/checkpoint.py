"""LYTC checkpoint container.

Layout (all integers little-endian)::

    b"LYTC" | uint32 version | uint64 manifest_len | manifest (UTF-8 JSON) | blobs

The manifest lists every tensor with name, shape, dtype ("float32"), byte
offset (relative to the start of the blob section) and byte length; blobs are
raw little-endian float32 in manifest order.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LYTC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def write_container(path, tensors: Mapping[str, np.ndarray], manifest: Mapping | None = None) -> None:
    """Atomically write ``tensors`` (cast to float32) plus extra manifest fields."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "dtype": "float32",
                        "offset": offset, "nbytes": data.nbytes})
        blobs.append(data.tobytes())
        offset += data.nbytes
    doc = dict(manifest or {})
    doc["tensors"] = entries
    raw = json.dumps(doc, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, len(raw)))
            fh.write(raw)
            for b in blobs:
                fh.write(b)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(buf) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for LYTC header ({len(buf)} bytes)")
    magic, version, mlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (reader is {VERSION})")
    start = _HEADER.size
    if start + mlen > len(buf):
        raise CheckpointError(f"{path}: manifest length {mlen} exceeds file size {len(buf)}")
    try:
        manifest = json.loads(buf[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest is not valid UTF-8 JSON ({exc})") from exc
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise CheckpointError(f"{path}: manifest has no 'tensors' list")
    blob_start = start + mlen
    avail = len(buf) - blob_start
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    expected_offset = 0
    for e in entries:
        name = e.get("name")
        shape = tuple(e.get("shape", ()))
        nbytes = int(e.get("nbytes", -1))
        offset = int(e.get("offset", -1))
        if e.get("dtype") != "float32":
            raise CheckpointError(f"{path}: tensor {name!r} has dtype {e.get('dtype')!r}, expected float32")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name!r} nbytes={nbytes} disagrees with shape {list(shape)}")
        if offset != expected_offset:
            raise CheckpointError(f"{path}: tensor {name!r} offset={offset}, expected {expected_offset}")
        if offset + nbytes > avail:
            raise CheckpointError(
                f"{path}: tensor {name!r} needs bytes [{offset}, {offset + nbytes}) of the blob "
                f"section but only {avail} are present (truncated file?)")
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=blob_start + offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
        expected_offset += nbytes
    if expected_offset != avail:
        raise CheckpointError(f"{path}: {avail - expected_offset} trailing bytes after the last tensor")
    return manifest, tensors

"""Single-file checkpoint container.

Layout (little endian)::

    b"USFCKPT\\0"            magic, 8 bytes
    uint32                   format version
    uint64                   header length H
    H bytes                  JSON header: metadata + array table
    ...                      raw array bytes, concatenated in table order
    32 bytes                 SHA-256 of everything above

Array names are ``/``-separated namespaces (``field/...``, ``prior/...``,
``prior/adapter/...``, ``optim/...``).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"USFCKPT\0"
FORMAT_VERSION = 1
_DIGEST = 32


def encode_checkpoint(arrays: Mapping[str, np.ndarray], metadata: dict | None = None) -> bytes:
    table = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name]))
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"metadata": metadata or {}, "arrays": table}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < len(MAGIC) + 12 + _DIGEST or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic or truncated)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt or truncated)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    try:
        header = json.loads(body[start : start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    base = start + hlen
    arrays = {}
    for entry in header["arrays"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(body):
            raise CheckpointError(f"array {entry['name']!r} runs past end of file")
        arr = np.frombuffer(body[lo:hi], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["metadata"]


def save_checkpoint(arrays: Mapping[str, np.ndarray], path, metadata: dict | None = None) -> Path:
    """Atomically write ``arrays`` and ``metadata`` to ``path``.

    The payload goes to a temporary file in the destination directory which is
    then renamed over ``path``; a crash mid-write leaves any old file intact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(arrays, metadata)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)


def namespace(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Entries under ``prefix/`` with the prefix stripped."""
    p = prefix.rstrip("/") + "/"
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}


def prefixed(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    p = prefix.rstrip("/") + "/"
    return {p + k: v for k, v in arrays.items()}

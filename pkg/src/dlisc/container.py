"""Flat binary container shared by weight, adapter and cache-pool files.

Layout (all integers little-endian)::

    magic      6 bytes   b"DLISC\\0"
    version    u16
    kind       u8        0 = weights, 1 = adapter, 2 = cache pool
    hlen       u32       length of the header block
    header     hlen bytes, canonical UTF-8 JSON (config + tensor index)
    tensors    row-major float32 LE, in header index order
    digest     32 bytes  sha256(header || tensors)

The digest is the content hash and doubles as the fingerprint of whatever
the file holds. A sidecar ``<file>.manifest.json`` repeats the tensor index
(names, shapes, byte offsets from the start of the file) and the hash.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DLISC\0"
VERSION = 1
KIND_WEIGHTS = 0
KIND_ADAPTER = 1
KIND_POOL = 2
KIND_NAMES = {KIND_WEIGHTS: "weights", KIND_ADAPTER: "adapter", KIND_POOL: "pool"}

_PREFIX = struct.Struct("<6sHBI")
_DIGEST_LEN = 32


class ContainerError(ValueError):
    """Raised for truncated, corrupt or mismatched container files."""


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode(kind: int, meta: dict, tensors: dict[str, np.ndarray]) -> tuple[bytes, str]:
    """Serialize to container bytes, returning ``(blob, content_hash_hex)``."""
    index = [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()]
    header = _canonical({"meta": meta, "tensors": index})
    h = hashlib.sha256(header)
    body = []
    for arr in tensors.values():
        b = _tensor_bytes(arr)
        h.update(b)
        body.append(b)
    digest = h.digest()
    blob = _PREFIX.pack(MAGIC, VERSION, kind, len(header)) + header + b"".join(body) + digest
    return blob, digest.hex()


def content_hash(meta: dict, tensors: dict[str, np.ndarray]) -> str:
    index = [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()]
    h = hashlib.sha256(_canonical({"meta": meta, "tensors": index}))
    for arr in tensors.values():
        h.update(_tensor_bytes(arr))
    return h.hexdigest()


def decode(blob: bytes, expect_kind: int | None = None) -> tuple[int, dict, dict[str, np.ndarray], str]:
    if len(blob) < _PREFIX.size + _DIGEST_LEN:
        raise ContainerError("file too short to be a container")
    magic, version, kind, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContainerError("bad magic bytes")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(
            f"expected a {KIND_NAMES.get(expect_kind)} file, got {KIND_NAMES.get(kind, kind)}"
        )
    pos = _PREFIX.size
    if pos + hlen > len(blob):
        raise ContainerError("truncated header")
    header_raw = blob[pos : pos + hlen]
    try:
        header = json.loads(header_raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from None
    pos += hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob) - _DIGEST_LEN:
            raise ContainerError(f"truncated tensor data at {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
        pos += nbytes
    if pos + _DIGEST_LEN != len(blob):
        raise ContainerError("trailing bytes or truncated digest")
    stored = blob[pos:]
    actual = hashlib.sha256(blob[_PREFIX.size : pos]).digest()
    if stored != actual:
        raise ContainerError("content hash mismatch")
    return kind, header.get("meta", {}), tensors, actual.hex()


def manifest(kind: int, meta: dict, tensors: dict[str, np.ndarray], digest: str) -> dict:
    index = [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()]
    offset = _PREFIX.size + len(_canonical({"meta": meta, "tensors": index}))
    entries = []
    for name, arr in tensors.items():
        nbytes = 4 * arr.size
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return {
        "format": "DLISC",
        "version": VERSION,
        "kind": KIND_NAMES[kind],
        "tensors": entries,
        "content_hash": digest,
    }


def write(path, kind: int, meta: dict, tensors: dict[str, np.ndarray]) -> str:
    path = Path(path)
    blob, digest = encode(kind, meta, tensors)
    path.write_bytes(blob)
    man = manifest(kind, meta, tensors, digest)
    Path(str(path) + ".manifest.json").write_text(json.dumps(man, indent=2) + "\n")
    return digest


def read(path, expect_kind: int | None = None):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from None
    kind, meta, tensors, digest = decode(blob, expect_kind)
    side = Path(str(path) + ".manifest.json")
    if side.exists():
        try:
            stored = json.loads(side.read_text())["content_hash"]
        except (ValueError, KeyError) as exc:
            raise ContainerError(f"corrupt manifest {side}: {exc}") from None
        if stored != digest:
            raise ContainerError(f"manifest hash {stored[:12]} does not match {digest[:12]}")
    return kind, meta, tensors, digest

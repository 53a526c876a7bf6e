"""Shared container layout for every binary file this package writes.

    magic | uint32 LE header length | header text (JSON) | payload

All numeric payloads are little-endian regardless of host byte order.
Headers are serialised with sorted keys so identical content gives
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import FormatError
from .optim import Parameters

F32 = np.dtype("<f4")
U32 = np.dtype("<u4")

CKPT_MAGIC = b"GCKPT1"


def dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    text = dump_header(header)
    return magic + struct.pack("<I", len(text)) + text + payload


def write_container(path, magic: bytes, header: dict, payload: bytes) -> None:
    data = pack(magic, header, payload)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def unpack(data: bytes, magic: bytes, what: str = "file"):
    """Split raw bytes into (header dict, payload bytes, payload offset)."""
    n = len(magic)
    if len(data) < n or data[:n] != magic:
        raise FormatError(f"bad magic for {what}: expected {magic!r}, found {bytes(data[:n])!r}", offset=0)
    if len(data) < n + 4:
        raise FormatError(f"truncated {what}: missing header length", offset=n)
    (hlen,) = struct.unpack_from("<I", data, n)
    start = n + 4
    if len(data) < start + hlen:
        raise FormatError(f"truncated {what}: header claims {hlen} bytes, {len(data) - start} available", offset=start)
    try:
        header = json.loads(bytes(data[start:start + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable {what} header: {exc}", offset=start) from None
    if not isinstance(header, dict):
        raise FormatError(f"{what} header is not a mapping", offset=start)
    off = start + hlen
    return header, data[off:], off


def read_container(path, magic: bytes, what: str = "file"):
    with open(path, "rb") as fh:
        data = fh.read()
    return unpack(data, magic, what)


def f32_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype=F32).tobytes()


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints

def params_payload(params: Parameters) -> bytes:
    return b"".join(f32_bytes(t.value) for t in params.values())


def save_checkpoint(path, params: Parameters, meta: dict) -> None:
    """Write parameters in registry order; ``meta`` must carry config_hash and seed."""
    header = dict(meta)
    header["params"] = [{"name": n, "shape": list(t.shape)} for n, t in params.items()]
    write_container(path, CKPT_MAGIC, header, params_payload(params))


def read_checkpoint_header(path) -> dict:
    header, _, _ = read_container(path, CKPT_MAGIC, "checkpoint")
    return header


def load_checkpoint(path, prefixes=None):
    """Return (Parameters, header).  With ``prefixes`` only matching
    parameters are decoded; the rest are skipped by offset."""
    header, payload, base = read_container(path, CKPT_MAGIC, "checkpoint")
    params = Parameters()
    pos = 0
    for entry in header.get("params", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * 4
        if pos + nbytes > len(payload):
            raise FormatError(f"truncated checkpoint payload in parameter {entry['name']!r}", offset=base + pos)
        if prefixes is None or entry["name"].startswith(tuple(prefixes)):
            arr = np.frombuffer(payload, dtype=F32, count=count, offset=pos).astype(np.float32).reshape(shape)
            params.add(entry["name"], arr)
        pos += nbytes
    if pos != len(payload):
        raise FormatError(f"checkpoint payload has {len(payload) - pos} trailing bytes", offset=base + pos)
    return params, header

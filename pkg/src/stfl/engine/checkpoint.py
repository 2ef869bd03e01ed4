"""STFLCKPT1: little-endian parameter blob behind a JSON header.

Layout::

    b"STFLCKPT1" | uint32 LE header length | UTF-8 JSON header | raw data

The header lists each block's name, shape, dtype and byte offset into the
data section, plus free-form ``meta``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from stfl.engine.params import ParamVector
from stfl.errors import ConfigError

MAGIC = b"STFLCKPT1"


def dumps(params: ParamVector, meta: dict | None = None) -> bytes:
    blocks, chunks, offset = [], [], 0
    for name, arr in params.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                       "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"blocks": blocks, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def loads(buf: bytes) -> tuple[ParamVector, dict]:
    if not buf.startswith(MAGIC):
        raise ConfigError("not an STFLCKPT1 checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", buf, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    data = memoryview(buf)[start + hlen:]
    out = []
    for b in header["blocks"]:
        raw = data[b["offset"]:b["offset"] + b["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(b["dtype"])).reshape(b["shape"])
        out.append((b["name"], arr.astype(arr.dtype.newbyteorder("="))))
    return ParamVector(out), header.get("meta", {})


def save(path, params: ParamVector, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta))


def load(path) -> tuple[ParamVector, dict]:
    return loads(Path(path).read_bytes())

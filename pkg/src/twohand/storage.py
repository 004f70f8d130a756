"""Binary container for named float64 arrays plus a key-value text header.

Layout (little endian)::

    magic  b"TWOHAND\\0"
    u32    format version
    u32    header byte length, then UTF-8 "key = value" lines
    u32    array count
    per array:
        u16  name byte length, then UTF-8 name
        u8   ndim, then ndim x u64 dims
        float64 payload, row-major

Checkpoints and cached dataset samples both use it.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TWOHAND\0"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def format_kv(items: Mapping[str, object]) -> str:
    lines = []
    for key, value in items.items():
        key = str(key)
        text = str(value)
        if "=" in key or "\n" in key or "\n" in text or not key.strip():
            raise ValueError(f"cannot store {key!r} = {text!r} as key-value text")
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def kv_hash(items: Mapping[str, object]) -> str:
    canon = format_kv({k: items[k] for k in sorted(items)})
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def pack(header: Mapping[str, object], arrays: Mapping[str, np.ndarray]) -> bytes:
    head = format_kv(header).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def unpack(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if blob[:len(MAGIC)] != MAGIC:
        raise ContainerError("not a container file (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ContainerError("truncated container")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, hlen = take("<II")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    header = parse_kv(blob[pos:pos + hlen].decode())
    pos += hlen
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(blob):
            raise ContainerError(f"truncated payload for {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise ContainerError("trailing bytes after last array")
    return header, arrays


def write_container(path, header, arrays) -> None:
    Path(path).write_bytes(pack(header, arrays))


def read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes())

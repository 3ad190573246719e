"""Binary tensor container: the on-disk format for weights and templates.

Layout (all integers unsigned 32-bit little-endian):

    magic "IPDW" | version | tensor count
    per tensor: name length | name (UTF-8) | rank | dims... | float32 LE data

Names must be unique, trailing bytes are forbidden, and load(save(x)) is
bit-identical for float32 input.  The whole header is validated before any
tensor memory is allocated.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"IPDW"
VERSION = 1


def save_tensors(path, tensors: dict):
    """Write a name -> float32 array mapping; insertion order is preserved."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes("C"))
    blob = b"".join(chunks)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class ContainerError(ValueError):
    pass


def load_tensors(path) -> dict:
    """Read a container; validates magic, version, bounds and uniqueness."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise ContainerError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        if offset + 4 > len(blob):
            raise ContainerError(f"{path}: truncated at tensor name length")
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + name_len > len(blob):
            raise ContainerError(f"{path}: truncated in tensor name")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if name in out:
            raise ContainerError(f"{path}: duplicate tensor name {name!r}")
        if offset + 4 > len(blob):
            raise ContainerError(f"{path}: truncated at rank of {name!r}")
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + 4 * rank > len(blob):
            raise ContainerError(f"{path}: truncated in dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * size
        if offset + nbytes > len(blob):
            raise ContainerError(f"{path}: truncated in data of {name!r}")
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += nbytes
        out[name] = data.reshape(dims).copy()
    if offset != len(blob):
        raise ContainerError(f"{path}: {len(blob) - offset} trailing bytes")
    return out

"""Binary tensor checkpoints.

Layout (little-endian)::

    b"S2N1"            magic
    u32                format version (1)
    u32                tensor count
    per tensor:
      u16 + bytes      UTF-8 name
      u8               rank
      u32 * rank       dims
      f32 * prod(dims) row-major data
    optional trailer:
      b"S2NC" u32 + bytes   UTF-8 ``key=value`` lines

Readers that only understand the tensor section stop after the last
tensor; the trailer carries the network config and run metadata.
"""
import struct

import numpy as np

from scan2num.errors import CheckpointError

MAGIC = b"S2N1"
TRAILER_MAGIC = b"S2NC"
VERSION = 1


def encode(tensors, meta=None):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: checkpoints store float32, got {arr.dtype}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if meta:
        text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
        parts.append(TRAILER_MAGIC + struct.pack("<I", len(text)) + text)
    return b"".join(parts)


def decode(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    meta = {}
    if buf[pos:pos + 4] == TRAILER_MAGIC:
        (tlen,) = struct.unpack_from("<I", buf, pos + 4)
        for line in buf[pos + 8:pos + 8 + tlen].decode("utf-8").splitlines():
            if line:
                k, _, v = line.partition("=")
                meta[k] = v
    return tensors, meta


def save(path, tensors, meta=None):
    with open(path, "wb") as fh:
        fh.write(encode(tensors, meta))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())

"""Binary checkpoint: network spec JSON followed by float32 parameter tensors.

Layout (little-endian)::

    b"RSUS"  u32 version  u32 spec_len  spec_json[spec_len]
    u32 n_tensors
    n_tensors * ( u32 name_len  name[name_len]  u32 ndim  u32 dims[ndim]  f32 data[prod(dims)] )

Tensor names are ``"<layer>.<field>"``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .nn import NetworkSpec, Parameters

MAGIC = b"RSUS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(net: NetworkSpec, params: Parameters) -> bytes:
    blob = json.dumps(net.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    tensors = list(params.named_tensors())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(np.asarray(arr.shape, "<u4").tobytes())
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> tuple[NetworkSpec, Parameters]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, blen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    net = NetworkSpec.from_dict(json.loads(raw[off:off + blen]))
    off += blen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    layers: dict[int, dict[str, np.ndarray]] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = tuple(int(s) for s in np.frombuffer(raw, "<u4", ndim, off))
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
        layer, field = name.split(".", 1)
        layers.setdefault(int(layer), {})[field] = arr
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after last tensor")
    return net, Parameters(layers)


def atomic_write(path, data: bytes | str) -> Path:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def save_checkpoint(path, net: NetworkSpec, params: Parameters) -> Path:
    return atomic_write(path, encode_checkpoint(net, params))


def load_checkpoint(path) -> tuple[NetworkSpec, Parameters]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return decode_checkpoint(path.read_bytes())
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from e

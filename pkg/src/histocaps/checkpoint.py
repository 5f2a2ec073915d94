"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"CAPN" | version | len(config) | config (UTF-8, canonical)
    then per parameter, in topological order:
    rank | dims... | float32 values (little-endian, row-major)
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .capsnet import Network, NetworkConfig, param_shapes

MAGIC = b"CAPN"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


def save_checkpoint(network: Network, path: str | os.PathLike) -> None:
    """Write parameters as float32; double-precision networks are rounded."""
    config = network.config.to_string().encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(config)))
        f.write(config)
        for tensor in network.params.values():
            f.write(struct.pack("<I", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path: str | os.PathLike) -> Network:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, config_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config = NetworkConfig.from_string(take(config_len).decode("utf-8"))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid embedded config: {exc}") from exc
    params = {}
    for name, shape in param_shapes(config).items():
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if dims != shape:
            raise CheckpointError(f"{path}: {name} stored as {dims}, config implies {shape}")
        count = int(np.prod(dims))
        params[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after last tensor")
    return Network(config, params)

"""Binary checkpoints for ContourNet models.

Layout, all integers little-endian:

    bytes 0..3   magic b"AMHN"
    u32          format version (currently 1)
    u64          config length in bytes, then that many bytes of UTF-8 JSON
    u64          parameter count
    manifest     per parameter, sorted by name:
                     u16 name length, UTF-8 name,
                     u8 rank, u32 per dimension,
                     u64 byte offset into the value blob
    blob         all values as float64, in manifest order

Sorting the manifest and canonicalizing the config JSON make the format a
pure function of the model state, so save -> load -> save is bit-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .network import ContourNet, ModelConfig
from .tensor import param_array

MAGIC = b"AMHN"
VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint file is malformed or mismatched."""


def _pack_header(config_json: bytes, n_params: int) -> bytes:
    return MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(config_json)) \
        + config_json + struct.pack("<Q", n_params)


def serialize(net: ContourNet) -> bytes:
    config_json = net.config.to_json().encode("utf-8")
    params = net.parameters()
    names = sorted(params)
    parts = [_pack_header(config_json, len(names))]
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(param_array(params[name]), dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", offset))
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    return b"".join(parts) + b"".join(blobs)


def save_checkpoint(path: str, net: ContourNet) -> None:
    data = serialize(net)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at "
                                  f"offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def load_checkpoint(path: str) -> ContourNet:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}: not a model checkpoint")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_len = r.unpack("<Q")
    try:
        config = ModelConfig.from_json(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"bad embedded config: {exc}") from exc
    n_params = r.unpack("<Q")

    manifest: list[tuple[str, tuple[int, ...], int]] = []
    for _ in range(n_params):
        name_len = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        ndim = r.unpack("<B")
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim)))
        offset = r.unpack("<Q")
        manifest.append((name, shape, offset))
    blob_start = r.pos

    net = ContourNet(config)
    params = net.parameters()
    expected = sorted(params)
    got = [m[0] for m in manifest]
    if got != expected:
        raise CheckpointError("checkpoint parameter names do not match the model "
                              f"built from its config (first difference: "
                              f"{next((a, b) for a, b in zip(got + [None], expected + [None]) if a != b)})")
    for name, shape, offset in manifest:
        arr = param_array(params[name])
        if tuple(shape) != arr.shape:
            raise CheckpointError(f"parameter '{name}' has shape {shape} on disk "
                                  f"but {arr.shape} in the model")
        start = blob_start + offset
        count = arr.size
        if start + count * 8 > len(data):
            raise CheckpointError(f"truncated value blob for '{name}'")
        arr[...] = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(arr.shape)
    return net

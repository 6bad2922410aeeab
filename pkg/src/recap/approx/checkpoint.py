"""Checkpoint serialization.

Layout: magic ``RCAP``, version (u32 LE), provenance (length-prefixed UTF-8),
block count, then named float32 blocks (length-prefixed name, ndim, dims,
little-endian payload), and a trailing CRC-32 over everything before it.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .network import Network
from .optim import AdamState

MAGIC = b"RCAP"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Bad magic or unsupported version."""


class CheckpointCorruptError(ValueError):
    """Truncated stream or checksum mismatch."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def write_blocks(blocks: dict[str, np.ndarray], provenance: str) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += _pack_str(provenance)
    out += struct.pack("<I", len(blocks))
    for name, arr in blocks.items():
        arr32 = np.ascontiguousarray(arr, dtype=np.float32)
        out += _pack_str(name)
        out += struct.pack("<I", arr32.ndim)
        for d in arr32.shape:
            out += struct.pack("<I", d)
        out += arr32.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointCorruptError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, have {len(self.blob)}"
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_blocks(blob: bytes) -> tuple[dict[str, np.ndarray], str]:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    provenance = r.string()
    blocks: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        data = r.take(4 * n_items)
        blocks[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    stored_crc = r.u32()
    actual_crc = zlib.crc32(blob[: r.pos - 4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointCorruptError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    return blocks, provenance


_HYPER = "opt/hyper"  # [step, lr, beta1, beta2, eps]


def save_checkpoint(net: Network, state: AdamState | None, provenance: str) -> bytes:
    blocks: dict[str, np.ndarray] = {f"net/{k}": v for k, v in net.params.items()}
    if state is not None:
        blocks[_HYPER] = np.array(
            [state.step, state.lr, state.beta1, state.beta2, state.eps], dtype=np.float32
        )
        for k, v in state.m.items():
            blocks[f"opt/m/{k}"] = v
        for k, v in state.v.items():
            blocks[f"opt/v/{k}"] = v
    return write_blocks(blocks, provenance)


def _sizes_from_params(params: dict[str, np.ndarray]) -> tuple[int, ...]:
    n = sum(1 for k in params if k.startswith("W"))
    sizes = [params["W0"].shape[0]]
    for i in range(n):
        sizes.append(params[f"W{i}"].shape[1])
    return tuple(sizes)


def load_checkpoint(blob: bytes) -> tuple[Network, AdamState | None, str]:
    blocks, provenance = read_blocks(blob)
    params = {k[len("net/") :]: v for k, v in blocks.items() if k.startswith("net/")}
    net = Network(_sizes_from_params(params), params)
    state = None
    if _HYPER in blocks:
        step, lr, b1, b2, eps = (float(x) for x in blocks[_HYPER])
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=int(step))
        state.m = {k[len("opt/m/") :]: v for k, v in blocks.items() if k.startswith("opt/m/")}
        state.v = {k[len("opt/v/") :]: v for k, v in blocks.items() if k.startswith("opt/v/")}
    return net, state, provenance

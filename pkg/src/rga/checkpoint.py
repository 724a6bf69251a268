"""Binary checkpoint format.

Layout (all integers little-endian):

    magic "RGAS" | u32 version | u32 fingerprint length | fingerprint utf-8
    | u32 tensor count
    | per tensor: u16 name length | name utf-8 | u8 ndim | u32 dims...
                  | raw little-endian float32 payload
    | u8 has_optimizer
    | if 1: u32 adam step | f64 learning rate
            | per registry parameter: raw f32 m payload | raw f32 v payload

Tensors cover the trainable parameters followed by the batch-norm running
stats, so a save/load round trip reproduces bit-identical forward outputs.
Loads reject wrong magic, unsupported versions, fingerprint mismatches and
truncated files with distinct errors.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    CheckpointError,
    FingerprintMismatchError,
    TruncatedCheckpointError,
)
from .net import ModelConfig, RGANet

MAGIC = b"RGAS"
VERSION = 1


def save_checkpoint(net: RGANet, path, adam_state=None) -> None:
    """Write the model (and optionally its Adam state) to ``path``."""
    tensors = list(net.state_items())
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    fp = net.config.fingerprint().encode("utf-8")
    chunks.append(struct.pack("<I", len(fp)))
    chunks.append(fp)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if adam_state is None:
        chunks.append(struct.pack("<B", 0))
    else:
        chunks.append(struct.pack("<B", 1))
        chunks.append(struct.pack("<I", adam_state.t))
        chunks.append(struct.pack("<d", adam_state.lr))
        for p in net.registry:
            chunks.append(np.ascontiguousarray(p.adam_m.data, dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(p.adam_v.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()

    def done(self) -> bool:
        return self.pos == len(self.buf)


def load_checkpoint(path, net: RGANet | None = None, load_optimizer: bool = False):
    """Load a checkpoint, either into ``net`` or into a freshly built model.

    Returns ``net`` or, with ``load_optimizer=True``, a ``(net, adam_state)``
    pair where ``adam_state`` is ``None`` if the file carries no optimizer.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported checkpoint version {version}")
    fingerprint = r.take(r.u32()).decode("utf-8")
    if net is None:
        net = RGANet(ModelConfig.from_fingerprint(fingerprint))
    elif net.config.fingerprint() != fingerprint:
        raise FingerprintMismatchError(
            f"{path}: checkpoint architecture [{fingerprint}] does not match "
            f"model [{net.config.fingerprint()}]"
        )

    count = r.u32()
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        n_elem = 1
        for dim in shape:
            n_elem *= dim
        loaded[name] = r.floats(n_elem).reshape(shape)

    expected = dict(net.state_items())
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise CheckpointError(
            f"{path}: tensor names do not match model (missing={missing}, extra={extra})"
        )
    for name, arr in loaded.items():
        target = expected[name]
        if arr.shape != target.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arr.shape}, model expects {target.shape}"
            )
        target[...] = arr.astype(target.dtype)

    adam_state = None
    if r.u8():
        from .optim import AdamState  # local import to avoid a cycle

        t = r.u32()
        lr = r.f64()
        adam_state = AdamState(lr=lr, t=t)
        for p in net.registry:
            p.adam_m.data[...] = r.floats(p.value.size).reshape(p.value.shape)
            p.adam_v.data[...] = r.floats(p.value.size).reshape(p.value.shape)
    if not r.done():
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes after payload")
    if load_optimizer:
        return net, adam_state
    return net

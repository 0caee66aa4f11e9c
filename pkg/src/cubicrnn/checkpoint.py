"""Binary checkpoint format.

Layout, all integers little-endian::

    b"CRNN"  u32 version
    u64 config length, UTF-8 config text
    u32 record count, records          # parameters
    u32 record count, records          # optimizer slots, "adam.m.<name>" / "adam.v.<name>"
    u64 iteration

A record is ``u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
float32 little-endian values`` in row-major order. Writes go to a temporary
file in the target directory that is then renamed over the destination.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .grid import CubicGrid
from .train import AdamSlot, TrainState

MAGIC = b"CRNN"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    slots: dict[str, np.ndarray]
    iteration: int


def _records(named: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(out)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    text = ckpt.config_text.encode("utf-8")
    return b"".join([
        MAGIC, struct.pack("<I", VERSION),
        struct.pack("<Q", len(text)), text,
        _records(ckpt.params),
        _records(ckpt.slots),
        struct.pack("<Q", ckpt.iteration),
    ])


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def records(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            try:
                name = self.take(n).decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError("checkpoint record name is not UTF-8") from None
            (rank,) = self.unpack("<I")
            dims = self.unpack(f"<{rank}I")
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(self.take(4 * size), dtype=_F32).reshape(dims)
            out[name] = arr.astype(np.float32)
        return out


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<Q")
    try:
        text = r.take(n).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("checkpoint config is not UTF-8") from None
    params = r.records()
    slots = r.records()
    (iteration,) = r.unpack("<Q")
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint")
    return Checkpoint(text, params, slots, iteration)


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    write_atomic(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def snapshot(config_text: str, grid: CubicGrid, state: TrainState) -> Checkpoint:
    """Checkpoint of the grid parameters and ADAM slots.

    The ADAM step count is not stored separately; it always equals the
    iteration counter.
    """
    params = {n: a for n, a in grid.named_parameters()}
    slots = {}
    for n in params:
        slots[f"adam.m.{n}"] = state.slots[n].m
    for n in params:
        slots[f"adam.v.{n}"] = state.slots[n].v
    return Checkpoint(config_text, params, slots, state.iteration)


def restore(ckpt: Checkpoint, grid: CubicGrid) -> TrainState:
    """Copy checkpoint arrays into ``grid`` in place and rebuild the train state.

    Raises ConfigError when names or shapes disagree with the grid.
    """
    named = dict(grid.named_parameters())
    missing = sorted(set(named) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(named))
    if missing or extra:
        raise ConfigError(f"checkpoint parameters do not match the configured grid "
                          f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for n, a in named.items():
        src = ckpt.params[n]
        if src.shape != a.shape:
            raise ConfigError(f"checkpoint parameter {n} has shape {src.shape}, "
                              f"grid expects {a.shape}")
    for n, a in named.items():
        a[...] = ckpt.params[n]
    slots = {}
    for n, a in named.items():
        m = ckpt.slots.get(f"adam.m.{n}")
        v = ckpt.slots.get(f"adam.v.{n}")
        if m is None or v is None or m.shape != a.shape or v.shape != a.shape:
            raise ConfigError(f"checkpoint optimizer slot for {n} is missing or misshapen")
        slots[n] = AdamSlot(m.astype(a.dtype), v.astype(a.dtype), ckpt.iteration)
    return TrainState(slots, ckpt.iteration)

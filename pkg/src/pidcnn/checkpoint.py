"""Checkpoint files for model weights and optimizer state.

Layout (little-endian)::

    "PIDW" u32 version=1 u32 n_tensors
    per tensor: u16 name length, UTF-8 name, u8 ndim, u32 extents, f32 values
    trailing sections, each: 4-byte tag, u32 payload length, payload
        "ADAM": u32 count; per entry: name, u32 step, m tensor, v tensor
        "META": UTF-8 JSON (network config, epoch, training fingerprint)

Batch-norm running statistics are stored as ordinary tensors named
``<layer>.running_mean`` / ``<layer>.running_var``. Unknown section tags are
skipped when reading.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import NetworkConfig
from .tensor import AdamState, ParameterStore, RunningStats

MAGIC = b"PIDW"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: NetworkConfig
    store: ParameterStore
    epoch: int = 0
    meta: dict = field(default_factory=dict)


def _write_name(buf, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _write_tensor(buf, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def tensor(self) -> np.ndarray:
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    store = ckpt.store
    tensors = [(name, p.data) for name, p in store.items()]
    for name, rs in store.buffers.items():
        tensors.append((f"{name}.running_mean", rs.mean))
        tensors.append((f"{name}.running_var", rs.var))

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors:
        _write_name(buf, name)
        _write_tensor(buf, arr)

    if store.adam:
        sec = io.BytesIO()
        sec.write(struct.pack("<I", len(store.adam)))
        for name, st in store.adam.items():
            _write_name(sec, name)
            sec.write(struct.pack("<I", st.step))
            _write_tensor(sec, st.m)
            _write_tensor(sec, st.v)
        payload = sec.getvalue()
        buf.write(b"ADAM" + struct.pack("<I", len(payload)) + payload)

    meta = {"config": ckpt.config.as_dict(), "epoch": ckpt.epoch, **ckpt.meta}
    payload = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(b"META" + struct.pack("<I", len(payload)) + payload)
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = checkpoint_bytes(ckpt)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: magic {magic!r} is not {MAGIC!r}")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: version {version} is not {VERSION}")
    tensors = {}
    for _ in range(count):
        name = r.name()
        tensors[name] = r.tensor()

    adam: dict[str, AdamState] = {}
    meta = None
    while not r.done:
        tag = r.take(4)
        (length,) = r.unpack("<I")
        sec = _Reader(r.take(length), path)
        if tag == b"ADAM":
            (n,) = sec.unpack("<I")
            for _ in range(n):
                name = sec.name()
                (step,) = sec.unpack("<I")
                m = sec.tensor()
                v = sec.tensor()
                adam[name] = AdamState(m, v, step)
        elif tag == b"META":
            meta = json.loads(sec.data.decode("utf-8"))
    if meta is None:
        raise CheckpointFormatError(f"{path}: missing META section")

    config = NetworkConfig(**meta.pop("config"))
    epoch = int(meta.pop("epoch"))
    store = ParameterStore()
    stats: dict[str, RunningStats] = {}
    for name, arr in tensors.items():
        for suffix, attr in ((".running_mean", "mean"), (".running_var", "var")):
            if name.endswith(suffix):
                setattr(stats.setdefault(name[: -len(suffix)], RunningStats()), attr, arr)
                break
        else:
            store.add(name, arr)
    store.buffers.update(stats)
    unknown = set(adam) - set(store.names())
    if unknown:
        raise CheckpointFormatError(f"{path}: optimizer state for unknown tensors {sorted(unknown)}")
    store.adam = adam
    return Checkpoint(config, store, epoch, meta)


def store_digest(store: ParameterStore, include_buffers: bool = True) -> str:
    """SHA-256 over names and raw bytes, for equality checks."""
    import hashlib

    h = hashlib.sha256()
    for name, p in store.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    if include_buffers:
        for name, rs in store.buffers.items():
            h.update(name.encode())
            for a in (rs.mean, rs.var):
                h.update(b"-" if a is None else np.ascontiguousarray(a).tobytes())
    return h.hexdigest()

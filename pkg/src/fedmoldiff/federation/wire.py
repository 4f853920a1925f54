"""Binary encoding of model updates (``FDM1``) and length-prefixed framing.

Layout, all integers little-endian::

    "FDM1" | version u16 | id: u16 len + UTF-8 | train_sample_count u64
    | metric count u16, then per metric: u16 len + UTF-8 name, f64 value
    | denoiser store | regressor store

    store = tensor count u32, then per tensor:
            u16 len + UTF-8 name | rank u8 | dims u64 * rank | values f32 * prod(dims)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..models.params import ParamStore

MAGIC = b"FDM1"
VERSION = 1
METRIC_KEYS = frozenset({"train_ce", "train_mse", "val_nll", "val_mae", "local_val_nll", "local_val_mae"})


class WireError(ValueError):
    pass


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class TruncatedPayload(WireError):
    pass


class DuplicateTensorName(WireError):
    pass


@dataclass(frozen=True)
class ModelUpdate:
    """Everything a collaborator sends back: weights, sample count, metrics."""

    collaborator_id: str
    denoiser_params: ParamStore
    regressor_params: ParamStore
    train_sample_count: int
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.train_sample_count <= 0:
            raise ValueError("train_sample_count must be positive")
        unknown = set(self.metrics) - METRIC_KEYS
        if unknown:
            raise ValueError(f"undocumented metric keys: {sorted(unknown)}")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise WireError("string too long")
    return struct.pack("<H", len(raw)) + raw


def _pack_store(store: ParamStore) -> bytes:
    parts = [struct.pack("<I", len(store))]
    for name, arr in store.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_update(u: ModelUpdate) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _pack_str(u.collaborator_id),
             struct.pack("<Q", u.train_sample_count), struct.pack("<H", len(u.metrics))]
    for k in sorted(u.metrics):
        parts.append(_pack_str(k))
        parts.append(struct.pack("<d", float(u.metrics[k])))
    parts.append(_pack_store(u.denoiser_params))
    parts.append(_pack_store(u.regressor_params))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedPayload(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError(f"invalid UTF-8 string: {exc}") from exc

    def store(self) -> ParamStore:
        (count,) = self.unpack("<I")
        tensors = {}
        for _ in range(count):
            name = self.string()
            if name in tensors:
                raise DuplicateTensorName(name)
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}Q") if rank else ()
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = self.take(4 * size)
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        return ParamStore(tensors)


def decode_update(data: bytes) -> ModelUpdate:
    r = _Reader(data)
    magic = bytes(r.take(4)) if len(data) >= 4 else None
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(data[:4])!r}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise UnsupportedVersion(f"payload version {version}, this build speaks {VERSION}")
    cid = r.string()
    (count,) = r.unpack("<Q")
    (n_metrics,) = r.unpack("<H")
    metrics = {}
    for _ in range(n_metrics):
        k = r.string()
        (metrics[k],) = r.unpack("<d")
    den = r.store()
    reg = r.store()
    if r.pos != len(data):
        raise WireError(f"{len(data) - r.pos} trailing bytes after payload")
    return ModelUpdate(cid, den, reg, count, metrics)


def frame(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload

"""Magnitude pruning, half-precision storage, and the binary model format.

Compression is post-training and storage-oriented: in memory every tensor
stays dense float32, while per-tensor encoding tags say how it is written
to disk (dense-f32, dense-f16, or sparse coordinate pairs). A pruned
tensor switches to the sparse encoding when at least half of it was
dropped, the break-even point for 8-byte (index, value) entries against
4-byte dense elements.

Model file (.gkdm), little-endian: magic "GKDM"; version u32 = 1;
architecture-descriptor JSON (u32 length prefix); tensor count u32; then
per tensor: name (u16 length + UTF-8), encoding u8, rank u8, dims u32
each, payload. Dense payloads are raw row-major values (f32 or f16);
sparse payloads are a u64 count, ascending u32 flat indices, then f32
values. Encoding is canonical: serializing a just-deserialized model
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .fileio import (DecodeError, Reader, SparseIndexError, Writer,
                     atomic_write)
from .models import (ModelParams, arch_descriptor, build_model,
                     spec_from_descriptor)

__all__ = [
    "SparseTensor",
    "prune",
    "to_half",
    "sparsity_report",
    "serialize",
    "deserialize",
    "save_model",
    "load_model",
]

MODEL_MAGIC = b"GKDM"
MODEL_VERSION = 1

DENSE_F32 = 0
DENSE_F16 = 1
SPARSE_F32 = 2

F16_MAX = 65504.0


@dataclass
class SparseTensor:
    """Flat coordinate form of a dense array: ascending indices + values."""

    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.uint32)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.indices.ndim != 1 or self.values.ndim != 1:
            raise ValueError("indices and values must be one-dimensional")
        if self.indices.shape != self.values.shape:
            raise ValueError(
                f"{self.indices.size} indices but {self.values.size} values")
        size = int(np.prod(self.shape, dtype=np.int64))
        idx = self.indices.astype(np.int64)
        if idx.size and int(idx[-1]) >= size:
            raise ValueError(f"index {int(idx[-1])} out of range for "
                             f"shape {self.shape}")
        if idx.size > 1 and not np.all(np.diff(idx) > 0):
            raise ValueError("indices must be strictly increasing")

    @property
    def count(self) -> int:
        return int(self.indices.size)

    @classmethod
    def from_dense(cls, arr: np.ndarray) -> "SparseTensor":
        flat = np.ascontiguousarray(arr, dtype=np.float32).ravel()
        idx = np.flatnonzero(flat)
        return cls(arr.shape, idx.astype(np.uint32), flat[idx])

    def to_dense(self) -> np.ndarray:
        flat = np.zeros(int(np.prod(self.shape, dtype=np.int64)),
                        dtype=np.float32)
        flat[self.indices] = self.values
        return flat.reshape(self.shape)


def prune(model: ModelParams, threshold: float) -> tuple[ModelParams, dict]:
    """Zero every learnable element with |w| < threshold; tag sparse storage.

    Returns a new model plus stats with per-tensor and total removed
    counts. BN running statistics are left untouched.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    out = model.copy()
    per_tensor: dict[str, int] = {}
    total = 0
    total_size = 0
    for name, t in out.tensors.items():
        if not out.is_learnable(name):
            continue
        drop = np.abs(t.data) < threshold
        removed = int(drop.sum())
        t.data[drop] = 0.0
        per_tensor[name] = removed
        total += removed
        total_size += t.data.size
        if removed * 2 >= t.data.size:
            out.encodings[name] = SPARSE_F32
    stats = {"per_tensor": per_tensor, "total_removed": total,
             "total_learnable": total_size}
    return out, stats


def to_half(model: ModelParams) -> ModelParams:
    """Round every tensor to the nearest binary16 value for storage.

    Values beyond the binary16 finite range are clamped to +-65504 first;
    a UserWarning reports how many. Dense tensors are tagged f16; sparse
    tensors keep their tag (the format stores sparse values as f32) but
    their values are rounded the same way so storage is consistent.
    """
    out = model.copy()
    clamped = 0
    for name, t in out.tensors.items():
        over = np.abs(t.data) > F16_MAX
        if over.any():
            clamped += int(over.sum())
            np.clip(t.data, -F16_MAX, F16_MAX, out=t.data)
        t.data[...] = t.data.astype(np.float16).astype(t.data.dtype)
        if out.encodings[name] != SPARSE_F32:
            out.encodings[name] = DENSE_F16
    if clamped:
        warnings.warn(f"{clamped} values exceeded the binary16 range and "
                      "were clamped to +-65504", stacklevel=2)
    return out


def _header_bytes(model: ModelParams) -> int:
    desc = json.dumps(arch_descriptor(model.spec), sort_keys=True,
                      separators=(",", ":")).encode()
    return 4 + 4 + 4 + len(desc) + 4


def _record_bytes(name: str, rank: int, payload: int) -> int:
    return 2 + len(name.encode()) + 1 + 1 + 4 * rank + payload


def _payload_bytes(encoding: int, size: int, stored: int) -> int:
    if encoding == SPARSE_F32:
        return 8 + 8 * stored
    return 2 * size if encoding == DENSE_F16 else 4 * size


def sparsity_report(model: ModelParams, threshold: float) -> dict:
    """Per-tensor below-threshold counts plus exact projected file sizes.

    ``projected_file_bytes`` is the size of serialize(prune(model)) and
    ``file_bytes`` the size of serialize(model), both computed from the
    format arithmetic without materializing either file.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    per_tensor: dict[str, dict] = {}
    total_below = 0
    total_size = 0
    current = projected = _header_bytes(model)
    for name, t in model.tensors.items():
        data = t.data
        size = data.size
        enc = model.encodings[name]
        nnz = int(np.count_nonzero(data))
        current += _record_bytes(name, data.ndim,
                                 _payload_bytes(enc, size, nnz))
        if model.is_learnable(name):
            below = int((np.abs(data) < threshold).sum())
            per_tensor[name] = {"size": size, "below": below,
                                "fraction": below / size}
            total_below += below
            total_size += size
            kept_nnz = int(np.count_nonzero(data[np.abs(data) >= threshold]))
            new_enc = SPARSE_F32 if below * 2 >= size else enc
            payload = _payload_bytes(new_enc, size, kept_nnz)
        else:
            payload = _payload_bytes(enc, size, nnz)
        projected += _record_bytes(name, data.ndim, payload)
    return {"threshold": threshold, "per_tensor": per_tensor,
            "total_below": total_below, "total_learnable": total_size,
            "file_bytes": current, "projected_file_bytes": projected}


def serialize(model: ModelParams) -> bytes:
    """Canonical .gkdm bytes for a model, tensors in build order."""
    w = Writer()
    w.raw(MODEL_MAGIC).u32(MODEL_VERSION)
    desc = json.dumps(arch_descriptor(model.spec), sort_keys=True,
                      separators=(",", ":"))
    w.utf8_u32(desc)
    w.u32(len(model.tensors))
    for name, t in model.tensors.items():
        data = np.ascontiguousarray(t.data, dtype=np.float32)
        enc = model.encodings[name]
        w.utf8_u16(name).u8(enc).u8(data.ndim)
        for d in data.shape:
            w.u32(d)
        if enc == DENSE_F32:
            w.array(data, "<f4")
        elif enc == DENSE_F16:
            w.array(data, "<f2")
        elif enc == SPARSE_F32:
            st = SparseTensor.from_dense(data)
            w.u64(st.count).array(st.indices, "<u4").array(st.values, "<f4")
        else:
            raise ValueError(f"unknown encoding {enc} for {name!r}")
    return w.getvalue()


def deserialize(data: bytes) -> ModelParams:
    """Decode .gkdm bytes, validating structure against the architecture."""
    r = Reader(data)
    r.expect_magic(MODEL_MAGIC)
    r.expect_version(MODEL_VERSION)
    try:
        desc = json.loads(r.utf8_u32())
    except json.JSONDecodeError as e:
        raise DecodeError(f"invalid architecture descriptor: {e}") from None
    try:
        spec = spec_from_descriptor(desc)
    except (ValueError, KeyError, TypeError) as e:
        raise DecodeError(f"invalid architecture descriptor: {e}") from None

    model = build_model(spec, seed=0)
    count = r.u32()
    if count != len(model.tensors):
        raise DecodeError(f"file stores {count} tensors but the architecture "
                          f"has {len(model.tensors)}")
    seen = set()
    for _ in range(count):
        name = r.utf8_u16()
        if name not in model.tensors:
            raise DecodeError(f"unknown tensor {name!r}")
        if name in seen:
            raise DecodeError(f"duplicate tensor {name!r}")
        seen.add(name)
        target = model.tensors[name]
        enc = r.u8()
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        if shape != target.shape:
            raise DecodeError(f"tensor {name!r} has shape {shape}, "
                              f"expected {target.shape}")
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if enc == DENSE_F32:
            values = r.array("<f4", size).reshape(shape)
        elif enc == DENSE_F16:
            values = r.array("<f2", size).astype(np.float32).reshape(shape)
        elif enc == SPARSE_F32:
            stored = r.u64()
            if stored > size:
                raise SparseIndexError(
                    f"tensor {name!r} stores {stored} sparse entries for "
                    f"{size} elements")
            idx = r.array("<u4", stored).astype(np.int64)
            vals = r.array("<f4", stored)
            if idx.size and int(idx[-1]) >= size:
                raise SparseIndexError(
                    f"tensor {name!r} sparse index {int(idx[-1])} out of "
                    f"range for {size} elements")
            if idx.size > 1 and not np.all(np.diff(idx) > 0):
                raise SparseIndexError(
                    f"tensor {name!r} sparse indices are not strictly "
                    "increasing")
            flat = np.zeros(size, dtype=np.float32)
            flat[idx] = vals
            values = flat.reshape(shape)
        else:
            raise DecodeError(f"unknown encoding {enc} for tensor {name!r}")
        target.data[...] = values
        model.encodings[name] = enc
    r.expect_eof()
    return model


def save_model(model: ModelParams, path) -> None:
    atomic_write(path, serialize(model))


def load_model(path) -> ModelParams:
    with open(path, "rb") as f:
        return deserialize(f.read())

"""Uplink codec: error feedback, Top-K, 8-bit quantization, wire format.

The binary payload ("QUP1") is the project's one wire protocol.  Layout,
little-endian, 21-byte header:

    magic   4 bytes  b"QUP1"
    round   u32
    client  u8       (client ids are capped at 255)
    length  u32      original dense vector length
    scale   f32      symmetric quantization scale (0 iff payload empty)
    nnz     u32
    entries nnz * (u32 index, i8 qvalue), indices strictly increasing

Byte size is therefore 21 + 5*nnz.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn import ParameterError

MAGIC = b"QUP1"
_HEADER = struct.Struct("<4sIBIfI")
HEADER_BYTES = _HEADER.size  # 21
ENTRY_BYTES = 5
_ENTRY_DTYPE = np.dtype([("index", "<u4"), ("qvalue", "<i1")])
MAX_CLIENT_ID = 255
QMAX = 127


class CodecError(ValueError):
    """Malformed payload or non-encodable update."""


@dataclass
class QuantizedUpdate:
    """Sparse, quantized flat update plus the metadata needed to apply it."""

    indices: np.ndarray  # u32, strictly increasing
    qvalues: np.ndarray  # i8 in [-127, 127]
    scale: float         # f32-representable
    length: int
    client_id: int
    round: int

    @property
    def nnz(self) -> int:
        return int(self.indices.size)


def accumulate(delta: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Error-feedback step: fold the previous round's untransmitted mass in."""
    if delta.shape != residual.shape:
        raise ParameterError(
            f"accumulate length mismatch: {delta.shape} vs {residual.shape}")
    return delta + residual


def top_k(u: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest-magnitude entries (ties: lower index wins), zero the rest."""
    if not 0 <= k <= u.size:
        raise ParameterError(f"k={k} out of range for length {u.size}")
    order = np.argsort(-np.abs(u), kind="stable")
    keep = order[:k]
    keep = keep[u[keep] != 0.0]
    out = np.zeros_like(u)
    out[keep] = u[keep]
    return out


def residual_update(u: np.ndarray, sparse: np.ndarray) -> np.ndarray:
    """New sparsification error: whatever top_k dropped."""
    if u.shape != sparse.shape:
        raise ParameterError("residual_update length mismatch")
    return u - sparse


def quantize(sparse: np.ndarray, client_id: int = 0, round_no: int = 0) -> QuantizedUpdate:
    """Symmetric 8-bit quantization with a single scale = max|v| / 127.

    Rounding is half-away-from-zero so quantize(-v) == -quantize(v).
    """
    if not np.all(np.isfinite(sparse)):
        raise CodecError("non-finite entry in update vector")
    idx = np.flatnonzero(sparse)
    if idx.size == 0:
        return QuantizedUpdate(np.empty(0, dtype=np.uint32),
                               np.empty(0, dtype=np.int8),
                               0.0, int(sparse.size), client_id, round_no)
    vals = sparse[idx]
    scale = float(np.float32(np.max(np.abs(vals)) / QMAX))
    q = np.sign(vals) * np.floor(np.abs(vals) / scale + 0.5)
    q = np.clip(q, -QMAX, QMAX).astype(np.int8)
    return QuantizedUpdate(idx.astype(np.uint32), q, scale,
                           int(sparse.size), client_id, round_no)


def dequantize(q: QuantizedUpdate) -> np.ndarray:
    """Reconstruct the dense flat vector (qvalue * scale at listed indices)."""
    if q.indices.size and int(q.indices.max()) >= q.length:
        raise CodecError("index beyond vector length")
    out = np.zeros(q.length)
    out[q.indices] = q.qvalues.astype(float) * q.scale
    return out


def encode(q: QuantizedUpdate) -> bytes:
    if not 0 <= q.client_id <= MAX_CLIENT_ID:
        raise CodecError(f"client id {q.client_id} does not fit in one byte")
    header = _HEADER.pack(MAGIC, q.round, q.client_id, q.length,
                          q.scale, q.nnz)
    entries = np.empty(q.nnz, dtype=_ENTRY_DTYPE)
    entries["index"] = q.indices
    entries["qvalue"] = q.qvalues
    return header + entries.tobytes()


def decode(buf: bytes) -> QuantizedUpdate:
    if len(buf) < HEADER_BYTES:
        raise CodecError("truncated payload: header incomplete")
    magic, round_no, client_id, length, scale, nnz = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    if len(buf) != HEADER_BYTES + ENTRY_BYTES * nnz:
        raise CodecError(
            f"payload size {len(buf)} != expected {HEADER_BYTES + ENTRY_BYTES * nnz}")
    entries = np.frombuffer(buf, dtype=_ENTRY_DTYPE, count=nnz, offset=HEADER_BYTES)
    indices = entries["index"].astype(np.uint32)
    if indices.size:
        if np.any(np.diff(indices.astype(np.int64)) <= 0):
            raise CodecError("indices not strictly increasing")
        if int(indices.max()) >= length:
            raise CodecError("index beyond vector length")
    return QuantizedUpdate(indices, entries["qvalue"].astype(np.int8),
                           float(scale), int(length), int(client_id),
                           int(round_no))


def uplink_bytes(q: QuantizedUpdate) -> int:
    """Exact encoded size without materializing the bytes."""
    return HEADER_BYTES + ENTRY_BYTES * q.nnz


def sparse_float_bytes(nnz: int) -> int:
    """Accounting for the quantization-off ablation: u32 index + f32 value."""
    return HEADER_BYTES + 8 * nnz


def dense_bytes(length: int) -> int:
    """Uncompressed float32 accounting used for the dense baselines."""
    return 4 * length

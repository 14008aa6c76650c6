"""Differentially private release of class counts.

T indices are selected one at a time with the exponential mechanism
(probability proportional to exp(eps * c[i] / (4 T)) over the indices not yet
selected, always scored on the original counts), each selected entry is
replaced by max{c[i] + Laplace(2 T / eps), 0}, and every other entry is zeroed.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .core_hash import RngState
from .errors import ModelFormatError, ParameterError
from .fbf_classifier import ClassCounts
from .utils import decode_varint, encode_varint

_VALUE = struct.Struct("<d")


@dataclass(frozen=True)
class DPParams:
    """Per-invocation privacy budget epsilon and number of released entries T."""

    epsilon: float
    T: int

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ParameterError(f"epsilon must be a positive finite number, got {self.epsilon}")
        if int(self.T) != self.T or self.T < 1:
            raise ParameterError(f"T must be a positive integer, got {self.T}")

    def check_size(self, size: int):
        if self.T > size:
            raise ParameterError(f"T={self.T} exceeds the number of count entries m*L={size}")

    def split(self, parties: int) -> "DPParams":
        """Per-party parameters: the global budget divided evenly among the parties."""
        return DPParams(self.epsilon / parties, self.T)


@dataclass(frozen=True, eq=False)
class PrivatizedCounts:
    """Sparse nonnegative real vector: sorted indices and their values."""

    length: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indices.shape != values.shape or indices.ndim != 1:
            raise ParameterError("Indices and values must be matching one-dimensional arrays")
        if indices.size and (indices[0] < 0 or indices[-1] >= self.length or np.any(np.diff(indices) <= 0)):
            raise ParameterError("Indices must be strictly increasing and below the vector length")
        if not np.isfinite(values).all() or (values < 0).any():
            raise ParameterError("Privatized values must be finite and nonnegative")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrivatizedCounts):
            return NotImplemented
        return (
            self.length == other.length
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "PrivatizedCounts":
        dense = np.asarray(dense, dtype=np.float64).ravel()
        indices = np.flatnonzero(dense)
        return cls(dense.size, indices, dense[indices])

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.length, dtype=np.float64)
        dense[self.indices] = self.values
        return dense


def add_privatized(a: PrivatizedCounts, b: PrivatizedCounts) -> PrivatizedCounts:
    """Sparse sum; the support of the result is the union of both supports."""
    if a.length != b.length:
        raise ParameterError(f"Cannot add privatized vectors of lengths {a.length} and {b.length}")
    indices = np.union1d(a.indices, b.indices)
    values = np.zeros(indices.size, dtype=np.float64)
    values[np.searchsorted(indices, a.indices)] += a.values
    values[np.searchsorted(indices, b.indices)] += b.values
    return PrivatizedCounts(a.length, indices, values)


def laplace_from_uniform(u: float, scale: float) -> float:
    """Inverse CDF of Laplace(0, scale) at u in (0, 1)."""
    centered = u - 0.5
    return -scale * math.copysign(1.0, centered) * math.log1p(-2.0 * abs(centered)) if centered else 0.0


def sample_laplace(scale: float, rng: RngState) -> float:
    """One Laplace(0, scale) draw by inversion of a single uniform (redrawn while it is 0)."""
    if not (math.isfinite(scale) and scale > 0):
        raise ParameterError(f"Laplace scale must be positive, got {scale}")
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return laplace_from_uniform(u, scale)


def selection_probabilities(c: np.ndarray, epsilon: float, T: int, available=None) -> np.ndarray:
    """Single-round exponential-mechanism distribution over the available indices."""
    logits = epsilon * np.asarray(c, dtype=np.float64) / (4.0 * T)
    if available is not None:
        logits = np.where(available, logits, -np.inf)
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def privatize(c, params: DPParams, rng: RngState) -> PrivatizedCounts:
    """Privatize a flattened count vector.

    Parameters:
    c : array-like
        Nonnegative integer counts of length m * L (class rows concatenated).
    params : DPParams
        The per-party budget and the number of released entries.
    rng : RngState
        Owned generator; each round draws one uniform for the selection and
        one for the Laplace noise.

    Returns:
    PrivatizedCounts
        At most T nonzero, nonnegative real entries.

    Raises:
    ParameterError
        If T exceeds the vector length or the counts are not nonnegative integers.
    """
    c = np.asarray(c)
    if c.ndim != 1:
        raise ParameterError("privatize expects a flattened count vector")
    counts = c.astype(np.float64)
    if not np.isfinite(counts).all() or (counts < 0).any() or np.any(counts != np.floor(counts)):
        raise ParameterError("Counts must be nonnegative integers")
    params.check_size(c.size)

    T = params.T
    logits = params.epsilon * counts / (4.0 * T)
    scale = 2.0 * T / params.epsilon
    available = np.ones(c.size, dtype=bool)
    released = {}
    for _ in range(T):
        masked = np.where(available, logits, -np.inf)
        cumulative = np.cumsum(np.exp(masked - masked.max()))
        target = rng.random() * cumulative[-1]
        index = int(np.searchsorted(cumulative, target, side="right"))
        if index >= c.size or not available[index]:
            index = int(np.flatnonzero(available)[-1])
        available[index] = False
        released[index] = max(counts[index] + sample_laplace(scale, rng), 0.0)

    indices = np.array(sorted(i for i, v in released.items() if v > 0.0), dtype=np.int64)
    values = np.array([released[i] for i in indices], dtype=np.float64)
    return PrivatizedCounts(c.size, indices, values)


def sparse_encode(p: PrivatizedCounts) -> bytes:
    """varint(length), varint(nnz), then (varint index, float64 little-endian value) pairs."""
    out = bytearray(encode_varint(p.length))
    out += encode_varint(p.nnz)
    for index, value in zip(p.indices.tolist(), p.values.tolist()):
        out += encode_varint(index)
        out += _VALUE.pack(value)
    return bytes(out)


def sparse_decode(blob: bytes) -> PrivatizedCounts:
    """Inverse of sparse_encode; raises ModelFormatError on malformed input."""
    length, offset = decode_varint(blob, 0)
    count, offset = decode_varint(blob, offset)
    if count > length:
        raise ModelFormatError(f"Sparse stream claims {count} entries for length {length}")
    indices = np.empty(count, dtype=np.int64)
    values = np.empty(count, dtype=np.float64)
    for j in range(count):
        indices[j], offset = decode_varint(blob, offset)
        if offset + _VALUE.size > len(blob):
            raise ModelFormatError("Sparse stream truncated inside a value")
        (values[j],) = _VALUE.unpack_from(blob, offset)
        offset += _VALUE.size
    if offset != len(blob):
        raise ModelFormatError(f"Sparse stream has {len(blob) - offset} trailing bytes")
    try:
        return PrivatizedCounts(length, indices, values)
    except ParameterError as e:
        raise ModelFormatError(f"Malformed sparse stream: {e}") from e


def privatize_counts(counts: ClassCounts, params: DPParams, rng: RngState) -> ClassCounts:
    """Privatize a whole count table and return it densely as real-valued counts."""
    if not counts.is_integer:
        raise ParameterError("Only integer class counts can be privatized")
    private = privatize(counts.counts.ravel(), params, rng)
    return ClassCounts(private.to_dense().reshape(counts.L, counts.m))

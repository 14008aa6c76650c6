"""Seeded lifting matrices and the FlyHash / SimHash codes built on them.

Every random draw in the package goes through ``RngState``, a thin wrapper
around numpy's Philox4x64-10 counter-based generator (Salmon et al., 2011).
The 128-bit Philox key is ``(seed, stream)``, so every (seed, stream) pair is
an independent, platform-independent substream; the lifting matrix, the
SimHash projection, data generation, splits and the DP mechanism each draw
from their own stream constant below.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sparse

from .errors import DimensionError, ParameterError

STREAM_MAIN = 0
STREAM_LIFTING = 1
STREAM_SIMHASH = 2
STREAM_DATA = 3
STREAM_SPLIT = 4
STREAM_THEORY = 5
STREAM_GRID = 6
# DP streams are offset by the party rank
STREAM_DP = 1 << 32

UINT64_MAX = (1 << 64) - 1

# Upper bound on the number of float64 cells materialized per chunk.
CHUNK_CELLS = 1 << 22


class RngState:
    """Deterministic generator state: a 64-bit seed, a substream id and a stream position.

    Parameters:
    seed : int
        64-bit unsigned seed.
    stream : int, optional
        64-bit unsigned substream id, by default 0.
    """

    def __init__(self, seed: int, stream: int = STREAM_MAIN):
        seed = int(seed)
        stream = int(stream)
        if not 0 <= seed <= UINT64_MAX:
            raise ParameterError(f"Seed must be a 64-bit unsigned integer, got {seed}")
        if not 0 <= stream <= UINT64_MAX:
            raise ParameterError(f"Stream must be a 64-bit unsigned integer, got {stream}")
        self.seed = seed
        self.stream = stream
        self._bit_generator = np.random.Philox(
            key=np.array([seed, stream], dtype=np.uint64)
        )
        self.generator = np.random.Generator(self._bit_generator)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream}, position={self.position})"

    @property
    def position(self) -> int:
        """Number of 64-bit words consumed from the stream so far."""
        state = self._bit_generator.state
        counter = int(state["state"]["counter"][0])
        return counter * 4 - (4 - int(state["buffer_pos"]))

    def copy(self) -> "RngState":
        clone = RngState(self.seed, self.stream)
        clone._bit_generator.state = self._bit_generator.state
        return clone

    def spawn(self, stream: int) -> "RngState":
        """Return a fresh generator on another substream of the same seed."""
        return RngState(self.seed, stream)

    def next_uint64(self) -> int:
        return int(self._bit_generator.random_raw())

    def random(self, size=None):
        return self.generator.random(size)


def new_rng(seed: int) -> RngState:
    return RngState(seed, STREAM_MAIN)


@dataclass(frozen=True)
class HashParams:
    """FlyHash hyper-parameters: lifted dimension m, row density s, hash density rho and the seed."""

    m: int
    s: int
    rho: int
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ParameterError(f"m must be at least 1, got {self.m}")
        if self.s < 1:
            raise ParameterError(f"s must be at least 1, got {self.s}")
        if not 1 <= self.rho <= self.m:
            raise ParameterError(f"rho must be in [1, m={self.m}], got {self.rho}")
        if not 0 <= self.seed <= UINT64_MAX:
            raise ParameterError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")

    def check_dimension(self, d: int):
        if self.s > d:
            raise DimensionError(f"s={self.s} exceeds the input dimension d={d}")


@dataclass(frozen=True, eq=False)
class SparseBitVector:
    length: int
    ones: np.ndarray

    def __post_init__(self):
        ones = np.asarray(self.ones, dtype=np.int64)
        if ones.ndim != 1:
            raise ParameterError("SparseBitVector indices must be one-dimensional")
        if ones.size and (ones[0] < 0 or ones[-1] >= self.length or np.any(np.diff(ones) <= 0)):
            raise ParameterError("SparseBitVector indices must be strictly increasing and < length")
        object.__setattr__(self, "ones", ones)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseBitVector):
            return NotImplemented
        return self.length == other.length and np.array_equal(self.ones, other.ones)

    def __len__(self) -> int:
        return self.length

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SparseBitVector":
        mask = np.asarray(mask, dtype=bool)
        return cls(length=mask.size, ones=np.flatnonzero(mask))

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.length, dtype=bool)
        dense[self.ones] = True
        return dense


@dataclass(frozen=True, eq=False)
class LiftingMatrix:
    """Sparse binary m x d matrix stored as an (m, s) array of sorted column indices."""

    m: int
    d: int
    s: int
    rows: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, LiftingMatrix):
            return NotImplemented
        return (self.m, self.d, self.s) == (other.m, other.d, other.s) and np.array_equal(
            self.rows, other.rows
        )

    @cached_property
    def csr(self) -> sparse.csr_matrix:
        indptr = np.arange(0, self.m * self.s + 1, self.s, dtype=np.int64)
        data = np.ones(self.m * self.s, dtype=np.float64)
        return sparse.csr_matrix(
            (data, self.rows.ravel(), indptr), shape=(self.m, self.d)
        )


def sample_subsets(rng: RngState, count: int, d: int, s: int) -> np.ndarray:
    """Draw `count` uniform s-subsets of [0, d), one per row, as sorted index arrays.

    Each subset is the positions of the s smallest of d i.i.d. uniforms, so the
    stream is consumed row-major and chunking does not change the result.
    """
    out = np.empty((count, s), dtype=np.int64)
    block = max(1, CHUNK_CELLS // d)
    for start in range(0, count, block):
        stop = min(count, start + block)
        keys = rng.random((stop - start, d))
        if s == d:
            picked = np.broadcast_to(np.arange(d), (stop - start, d))
        else:
            picked = np.argpartition(keys, s - 1, axis=1)[:, :s]
        out[start:stop] = np.sort(picked, axis=1)
    return out


def gen_lifting_matrix(rng: RngState, m: int, d: int, s: int) -> LiftingMatrix:
    """Generate the sparse binary lifting matrix with s ones per row.

    Parameters:
    rng : RngState
        Generator the rows are drawn from; advanced by m * d uniforms.
    m : int
        Number of rows (lifted dimension).
    d : int
        Number of columns (input dimension).
    s : int
        Ones per row.

    Returns:
    LiftingMatrix
        The matrix, reconstructible bit-exactly from (seed, stream, m, d, s).

    Raises:
    ParameterError
        If m < 1, s < 1 or s > d.
    """
    if m < 1:
        raise ParameterError(f"m must be at least 1, got {m}")
    if s < 1 or s > d:
        raise ParameterError(f"s must be in [1, d={d}], got {s}")
    rows = sample_subsets(rng, m, d, s)
    rows.setflags(write=False)
    return LiftingMatrix(m=m, d=d, s=s, rows=rows)


def gen_gaussian_matrix(rng: RngState, m: int, d: int) -> np.ndarray:
    """Dense m x d standard-normal projection used by SimHash."""
    if m < 1 or d < 1:
        raise ParameterError(f"SimHash projection needs m >= 1 and d >= 1, got m={m}, d={d}")
    projection = rng.generator.standard_normal((m, d))
    projection.setflags(write=False)
    return projection


def winner_take_all(activations: np.ndarray, rho: int) -> np.ndarray:
    """Boolean mask with exactly rho ones per row at the largest activations.

    Ties at the threshold go to the smaller index.
    """
    activations = np.atleast_2d(activations)
    n, m = activations.shape
    if rho == m:
        return np.ones((n, m), dtype=bool)
    kth = m - rho
    threshold = np.partition(activations, kth, axis=1)[:, kth][:, None]
    above = activations > threshold
    tied = activations == threshold
    needed = rho - above.sum(axis=1, keepdims=True)
    return above | (tied & (np.cumsum(tied, axis=1) <= needed))


def _as_matrix(X, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != d:
        raise DimensionError(f"Expected inputs with dimension {d}, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ParameterError("Inputs must be finite")
    return X


class FlyHasher:
    """FlyHash h(x) = WTA_rho(M x) over a fixed lifting matrix."""

    kind = "flyhash"

    def __init__(self, matrix: LiftingMatrix, rho: int):
        if not 1 <= rho <= matrix.m:
            raise ParameterError(f"rho must be in [1, m={matrix.m}], got {rho}")
        self.matrix = matrix
        self.rho = rho

    @property
    def m(self) -> int:
        return self.matrix.m

    @property
    def d(self) -> int:
        return self.matrix.d

    def iter_masks(self, X):
        """Yield (start, mask) pairs over row chunks of X; mask is (rows, m) boolean."""
        X = _as_matrix(X, self.d)
        block = max(1, CHUNK_CELLS // self.m)
        for start in range(0, X.shape[0], block):
            chunk = X[start : start + block]
            yield start, winner_take_all(np.asarray(self.matrix.csr @ chunk.T).T, self.rho)

    def hash_batch(self, X) -> np.ndarray:
        X = _as_matrix(X, self.d)
        out = np.empty((X.shape[0], self.m), dtype=bool)
        for start, mask in self.iter_masks(X):
            out[start : start + mask.shape[0]] = mask
        return out

    def iter_indices(self, X):
        """Yield (start, indices) pairs; indices is (rows, rho), ascending per row."""
        for start, mask in self.iter_masks(X):
            yield start, np.nonzero(mask)[1].reshape(mask.shape[0], self.rho)

    def hash_indices(self, X) -> np.ndarray:
        """(n, rho) array of the set bit positions of every row, ascending."""
        X = _as_matrix(X, self.d)
        out = np.empty((X.shape[0], self.rho), dtype=np.int64)
        for start, indices in self.iter_indices(X):
            out[start : start + indices.shape[0]] = indices
        return out

    def hash(self, x) -> SparseBitVector:
        return SparseBitVector(self.m, self.hash_indices(x)[0])


class SimHasher:
    """SimHash bit i = [p_i . x >= 0] over a dense Gaussian projection."""

    kind = "simhash"

    def __init__(self, projection: np.ndarray):
        projection = np.asarray(projection, dtype=np.float64)
        if projection.ndim != 2:
            raise ParameterError("SimHash projection must be a matrix")
        self.projection = projection

    @property
    def m(self) -> int:
        return self.projection.shape[0]

    @property
    def d(self) -> int:
        return self.projection.shape[1]

    def iter_masks(self, X):
        X = _as_matrix(X, self.d)
        block = max(1, CHUNK_CELLS // self.m)
        for start in range(0, X.shape[0], block):
            yield start, (X[start : start + block] @ self.projection.T) >= 0.0

    def hash_batch(self, X) -> np.ndarray:
        X = _as_matrix(X, self.d)
        out = np.empty((X.shape[0], self.m), dtype=bool)
        for start, mask in self.iter_masks(X):
            out[start : start + mask.shape[0]] = mask
        return out

    def hash(self, x) -> SparseBitVector:
        return SparseBitVector.from_mask(self.hash_batch(x)[0])


def fly_hash(M: LiftingMatrix, rho: int, x) -> SparseBitVector:
    """FlyHash of a single vector: exactly rho ones at the largest entries of M x.

    Parameters:
    M : LiftingMatrix
        The lifting matrix.
    rho : int
        Number of ones in the hash, 1 <= rho <= m.
    x : array-like
        Finite input vector of length d.

    Returns:
    SparseBitVector
        The hash; ties among equal activations are broken by smaller index.

    Raises:
    ParameterError
        If rho is out of range or x is not finite.
    DimensionError
        If x does not have length d.
    """
    return FlyHasher(M, rho).hash(x)


def sim_hash(P: np.ndarray, x) -> SparseBitVector:
    """SimHash of a single vector; a zero activation counts as a set bit."""
    return SimHasher(P).hash(x)


def make_fly_hasher(params: HashParams, d: int) -> FlyHasher:
    params.check_dimension(d)
    matrix = gen_lifting_matrix(RngState(params.seed, STREAM_LIFTING), params.m, d, params.s)
    return FlyHasher(matrix, params.rho)


def make_sim_hasher(m: int, d: int, seed: int) -> SimHasher:
    return SimHasher(gen_gaussian_matrix(RngState(seed, STREAM_SIMHASH), m, d))

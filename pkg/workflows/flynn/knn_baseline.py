"""Brute-force k-nearest-neighbour oracle plus the margin and k-th neighbour distance."""

from enum import Enum

import numpy as np
from scipy.spatial.distance import cdist

from .data import Dataset
from .errors import DataError, DimensionError, ParameterError

# Query rows per similarity block.
QUERY_BLOCK = 256


class Similarity(str, Enum):
    NEGATIVE_EUCLIDEAN = "negative-euclidean"
    NEGATIVE_LINF = "negative-linf"
    COSINE = "cosine"


def similarity(A: np.ndarray, B: np.ndarray, kind=Similarity.NEGATIVE_EUCLIDEAN) -> np.ndarray:
    """(len(A), len(B)) similarity matrix; larger is more similar.

    Negative Euclidean similarity is computed from squared distances, which
    preserves the neighbour order. Cosine similarity with a zero vector is 0.
    """
    kind = Similarity(kind)
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if kind is Similarity.NEGATIVE_EUCLIDEAN:
        return -cdist(A, B, "sqeuclidean")
    if kind is Similarity.NEGATIVE_LINF:
        return -cdist(A, B, "chebyshev")
    norms_a = np.linalg.norm(A, axis=1, keepdims=True)
    norms_b = np.linalg.norm(B, axis=1, keepdims=True)
    unit_a = np.divide(A, norms_a, out=np.zeros_like(A), where=norms_a > 0)
    unit_b = np.divide(B, norms_b, out=np.zeros_like(B), where=norms_b > 0)
    return unit_a @ unit_b.T


def _check(S: Dataset, X: np.ndarray, k: int):
    if S.n == 0:
        raise DataError("kNN needs a nonempty training set")
    if X.shape[1] != S.d:
        raise DimensionError(f"Training dimension {S.d} does not match query dimension {X.shape[1]}")
    if not 1 <= k <= S.n:
        raise ParameterError(f"k must be in [1, n={S.n}], got {k}")


def neighbour_order(S: Dataset, X, k: int, kind=Similarity.NEGATIVE_EUCLIDEAN) -> np.ndarray:
    """(len(X), k) training indices by decreasing similarity; ties go to the smaller index."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check(S, X, k)
    out = np.empty((X.shape[0], k), dtype=np.int64)
    for start in range(0, X.shape[0], QUERY_BLOCK):
        sims = similarity(X[start : start + QUERY_BLOCK], S.X, kind)
        out[start : start + sims.shape[0]] = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return out


def knn_predict(S: Dataset, X, ks, kind=Similarity.NEGATIVE_EUCLIDEAN) -> dict:
    """Majority-vote predictions for every k in `ks` from a single neighbour ranking.

    Returns a dict k -> array of internal label indices. Vote ties go to the
    smallest class index.
    """
    ks = sorted({int(k) for k in ks})
    if not ks:
        raise ParameterError("At least one k is required")
    order = neighbour_order(S, X, ks[-1], kind)
    for k in ks:
        _check(S, np.empty((0, S.d)), k)
    votes = np.cumsum(np.eye(S.L, dtype=np.int64)[S.y[order]], axis=1)
    return {k: np.argmax(votes[:, k - 1, :], axis=1) for k in ks}


def knn_classify(S: Dataset, x, k: int, kind=Similarity.NEGATIVE_EUCLIDEAN) -> str:
    """Majority label among the k most similar training points."""
    return S.labels[int(knn_predict(S, x, [k], kind)[k][0])]


def margin(S: Dataset) -> float:
    """Smallest l-infinity distance between points of different classes (binary sets only)."""
    present = np.flatnonzero(S.class_counts())
    if present.size != 2:
        raise DataError(f"Margin is defined for exactly two nonempty classes, found {present.size}")
    first = S.X[S.y == present[0]]
    second = S.X[S.y == present[1]]
    best = np.inf
    for start in range(0, first.shape[0], QUERY_BLOCK):
        best = min(best, float(cdist(first[start : start + QUERY_BLOCK], second, "chebyshev").min()))
    return best


def kth_nn_distance(S: Dataset, x, k: int, metric: str = "chebyshev") -> float:
    """Distance from x to its k-th nearest training point under a scipy metric."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check(S, x, k)
    distances = cdist(x, S.X, metric)[0]
    return float(np.partition(distances, k - 1)[k - 1])

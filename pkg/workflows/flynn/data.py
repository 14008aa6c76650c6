"""Datasets: synthetic generation, CSV I/O, cached URL fetches, splits and shards."""

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import urlparse

import numpy as np
import pandas as pd
import requests

from .core_hash import STREAM_DATA, STREAM_SPLIT, RngState
from .errors import DataError, FetchError, ParameterError
from .utils import get_logger

logger = get_logger(__name__)

DEFAULT_CACHE_DIR = Path.home() / ".cache" / "flynn"
CACHE_ENV_VAR = "FLYNN_CACHE_DIR"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled points.

    X is an (n, d) float64 matrix, y holds internal class indices into
    `labels`, the lexicographically sorted table of external label strings.
    """

    X: np.ndarray
    y: np.ndarray
    labels: tuple
    provenance: str = ""

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True)
        labels = tuple(str(label) for label in self.labels)
        if X.ndim != 2:
            raise DataError(f"Feature matrix must be two-dimensional, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"Expected {X.shape[0]} labels, got shape {y.shape}")
        if not np.isfinite(X).all():
            raise DataError("Features must be finite")
        if list(labels) != sorted(set(labels)):
            raise DataError("Label table must be sorted and free of duplicates")
        if y.size and (y.min() < 0 or y.max() >= len(labels)):
            raise DataError("Label index outside the label table")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_raw_labels(cls, X, raw_labels, provenance: str = "") -> "Dataset":
        """Build a dataset from external labels, creating the sorted label table."""
        raw = np.asarray([str(label) for label in raw_labels], dtype=object)
        labels = tuple(sorted(set(raw.tolist())))
        index = {label: i for i, label in enumerate(labels)}
        y = np.fromiter((index[label] for label in raw), dtype=np.int64, count=raw.size)
        return cls(X=X, y=y, labels=labels, provenance=provenance)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def L(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[indices], self.y[indices], self.labels, self.provenance)

    def with_features(self, X) -> "Dataset":
        return Dataset(X, self.y, self.labels, self.provenance)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.L)

    def external_labels(self) -> list:
        return [self.labels[i] for i in self.y]


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the Gaussian-cluster classification generator."""

    n: int
    d: int
    n_classes: int
    clusters_per_class: int = 3
    class_sep: float = 2.0
    seed: int = 0
    n_informative: int = None
    binarize: int = None

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ParameterError(f"n and d must be positive, got n={self.n}, d={self.d}")
        if self.n_classes < 2:
            raise ParameterError(f"At least two classes are required, got {self.n_classes}")
        if self.clusters_per_class < 1:
            raise ParameterError("clusters_per_class must be at least 1")
        if self.class_sep <= 0:
            raise ParameterError("class_sep must be positive")
        if self.n_informative is not None and not 1 <= self.n_informative <= self.d:
            raise ParameterError(f"n_informative must be in [1, d], got {self.n_informative}")
        if self.binarize is not None and not 1 <= self.binarize < self.d:
            raise ParameterError(f"binarize must be in [1, d), got {self.binarize}")


def _distinct_vertices(rng: RngState, count: int, k: int) -> np.ndarray:
    """`count` distinct vertices of the {0, 1}^k hypercube."""
    if k < 63 and count > (1 << k):
        raise DataError(
            f"Cannot place {count} clusters on distinct vertices of a {k}-dimensional hypercube"
        )
    if k <= 16:
        codes = rng.generator.choice(1 << k, size=count, replace=False)
        return ((codes[:, None] >> np.arange(k)) & 1).astype(np.int8)
    seen = set()
    vertices = []
    while len(vertices) < count:
        bits = rng.generator.integers(0, 2, size=k, dtype=np.int8)
        key = bits.tobytes()
        if key not in seen:
            seen.add(key)
            vertices.append(bits)
    return np.stack(vertices)


def make_classification(spec: SynthSpec) -> Dataset:
    """Generate a dataset of unit-variance Gaussian clusters around hypercube vertices.

    Each class owns `clusters_per_class` clusters; centers are distinct vertices
    of the hypercube with side 2 * class_sep in the informative dimensions.
    Point i belongs to class i mod L and to that class's cluster (i div L) mod C,
    so classes are balanced to within one point. Rows are shuffled afterwards.
    """
    informative = spec.n_informative or spec.d
    L, C = spec.n_classes, spec.clusters_per_class
    rng = RngState(spec.seed, STREAM_DATA)

    vertices = _distinct_vertices(rng, L * C, informative)
    centers = spec.class_sep * (2.0 * vertices - 1.0)

    point = np.arange(spec.n)
    classes = point % L
    # cluster j belongs to class j mod L
    clusters = classes + L * ((point // L) % C)

    X = rng.generator.standard_normal((spec.n, spec.d))
    X[:, :informative] += centers[clusters]
    order = rng.generator.permutation(spec.n)

    names = [str(c) for c in range(L)]
    table = tuple(sorted(names))
    remap = np.array([table.index(name) for name in names], dtype=np.int64)
    provenance = (
        f"synthetic(n={spec.n},d={spec.d},L={L},C={C},sep={spec.class_sep},"
        f"informative={informative},seed={spec.seed})"
    )
    dataset = Dataset(X[order], remap[classes[order]], table, provenance)
    if spec.binarize is not None:
        dataset = binarize(dataset, spec.binarize)
    return dataset


def binarize(dataset: Dataset, b: int) -> Dataset:
    """Keep the b largest features of each row as ones; ties go to the smaller index."""
    if not 1 <= b < dataset.d:
        raise ParameterError(f"binarize needs 1 <= b < d={dataset.d}, got {b}")
    order = np.argsort(-dataset.X, axis=1, kind="stable")[:, :b]
    X = np.zeros_like(dataset.X)
    np.put_along_axis(X, order, 1.0, axis=1)
    return Dataset(X, dataset.y, dataset.labels, f"{dataset.provenance}+binarize({b})")


def minmax_scale(dataset: Dataset) -> Dataset:
    """Scale every feature to [0, 1]; constant features map to 0."""
    if dataset.n == 0:
        return dataset
    low = dataset.X.min(axis=0)
    span = dataset.X.max(axis=0) - low
    safe = np.where(span > 0, span, 1.0)
    return dataset.with_features((dataset.X - low) / safe)


def read_feature_matrix(path, has_header: bool = True, drop_column=None) -> tuple:
    """Read a numeric CSV; returns (features, dropped column as strings or None).

    Numbers are parsed with correctly rounded decimal to binary conversion.
    """
    try:
        frame = pd.read_csv(
            path,
            header=0 if has_header else None,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
        )
    except FileNotFoundError as e:
        raise DataError(f"CSV file not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"CSV file {path} is empty") from e
    except pd.errors.ParserError as e:
        raise DataError(f"Ragged rows in {path}: {e}") from e

    if frame.isna().any().any():
        raise DataError(f"Ragged rows in {path}: some rows have fewer fields than the header")

    dropped = None
    if drop_column is not None:
        if isinstance(drop_column, str) and has_header:
            if drop_column not in frame.columns:
                raise DataError(f"Label column '{drop_column}' not found in {path}")
            position = list(frame.columns).index(drop_column)
        else:
            try:
                position = int(drop_column)
            except ValueError as e:
                raise DataError(f"Label column '{drop_column}' named, but {path} has no header row") from e
            if position < 0:
                position += frame.shape[1]
            if not 0 <= position < frame.shape[1]:
                raise DataError(f"Label column {drop_column} out of range in {path}")
        dropped = frame.iloc[:, position].str.strip().tolist()
        frame = frame.drop(columns=frame.columns[position])

    cells = frame.to_numpy(dtype=str)
    try:
        features = np.char.strip(cells).astype(np.float64) if cells.size else cells.astype(np.float64)
    except ValueError as e:
        raise DataError(f"Non-numeric feature in {path}: {e}") from e
    if not np.isfinite(features).all():
        raise DataError(f"Non-finite feature in {path}")
    return features, dropped


def load_csv(path, label_column=-1, has_header: bool = True) -> Dataset:
    """Load a labelled CSV; the label column is given by name or position (default last)."""
    features, labels = read_feature_matrix(path, has_header=has_header, drop_column=label_column)
    logger.info(f"[LOADED] {len(labels)} rows with {features.shape[1]} features from {path}")
    return Dataset.from_raw_labels(features, labels, provenance=f"csv({path})")


def write_csv(dataset: Dataset, path, label_column: str = "label"):
    frame = pd.DataFrame(dataset.X, columns=[f"x{j}" for j in range(dataset.d)])
    frame[label_column] = dataset.external_labels()
    frame.to_csv(path, index=False)


def _sha256(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


def _download(url: str, retries: int, backoff: float) -> bytes:
    last_error = None
    for attempt in range(retries):
        try:
            response = requests.get(url, timeout=30)
            response.raise_for_status()
            return response.content
        except requests.RequestException as e:
            last_error = e
            logger.warning(f"[RETRY] download of {url} failed (attempt {attempt + 1}/{retries}): {e}")
            if attempt + 1 < retries:
                time.sleep(backoff * 2**attempt)
    raise FetchError(f"Could not download {url} after {retries} attempts: {last_error}")


def fetch_dataset(url: str, cache_dir=None, retries: int = 3, backoff: float = 0.5) -> Path:
    """Download `url` into the content-addressed cache and return the local path.

    A cached copy is reused while its SHA-256 matches the index; a corrupted copy
    is downloaded again, and a re-download whose digest differs from the recorded
    one raises FetchError.
    """
    cache_dir = Path(cache_dir or os.environ.get(CACHE_ENV_VAR) or DEFAULT_CACHE_DIR)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index_path = cache_dir / "index.json"
    index = {}
    if index_path.exists():
        try:
            index = json.loads(index_path.read_text())
        except json.JSONDecodeError:
            logger.warning(f"[CACHE] unreadable index {index_path}; starting a new one")

    entry = index.get(url)
    if entry is not None:
        cached = cache_dir / entry["file"]
        if cached.exists() and _sha256(cached.read_bytes()) == entry["sha256"]:
            logger.info(f"[CACHE] hit for {url}")
            return cached
        logger.warning(f"[CACHE] cached copy of {url} is missing or corrupted; downloading again")

    content = _download(url, retries, backoff)
    digest = _sha256(content)
    if entry is not None and digest != entry["sha256"]:
        raise FetchError(
            f"Content hash mismatch for {url}: expected {entry['sha256']}, got {digest}"
        )

    suffix = Path(urlparse(url).path).suffix
    target = cache_dir / f"{digest}{suffix}"
    target.write_bytes(content)
    index[url] = {"file": target.name, "sha256": digest, "bytes": len(content)}
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True))
    logger.info(f"[FETCHED] {url} -> {target}")
    return target


def kfold(dataset: Dataset, k: int, seed: int) -> list:
    """Split into k folds after a seeded permutation; returns (train, test) pairs."""
    if k < 2 or k > dataset.n:
        raise ParameterError(f"k must be in [2, n={dataset.n}], got {k}")
    order = RngState(seed, STREAM_SPLIT).generator.permutation(dataset.n)
    folds = np.array_split(order, k)
    splits = []
    for fold in folds:
        train_mask = np.ones(dataset.n, dtype=bool)
        train_mask[fold] = False
        splits.append((dataset.subset(np.flatnonzero(train_mask)), dataset.subset(np.sort(fold))))
    return splits


def train_test_split(dataset: Dataset, test_size, seed: int) -> tuple:
    """Seeded split; test_size is a fraction in (0, 1) or a row count."""
    n_test = int(round(test_size * dataset.n)) if isinstance(test_size, float) else int(test_size)
    if not 1 <= n_test < dataset.n:
        raise ParameterError(f"Test size must leave both sides nonempty, got {test_size}")
    order = RngState(seed, STREAM_SPLIT).generator.permutation(dataset.n)
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


SHARD_POLICIES = ("round-robin", "by-class")


def shard(dataset: Dataset, parties: int, policy: str = "round-robin") -> list:
    """Partition rows among parties.

    round-robin gives row i to party i mod tau; by-class gives every row of class
    c to party c mod tau, so some shards may be empty.
    """
    if not 1 <= parties <= max(dataset.n, 1):
        raise ParameterError(f"Number of parties must be in [1, n={dataset.n}], got {parties}")
    if policy == "round-robin":
        owner = np.arange(dataset.n) % parties
    elif policy == "by-class":
        owner = dataset.y % parties
    else:
        raise ParameterError(f"Unknown shard policy '{policy}', expected one of {SHARD_POLICIES}")
    return [dataset.subset(np.flatnonzero(owner == t)) for t in range(parties)]


def normalized_accuracy(accuracy: float, knn_accuracy: float) -> float:
    """1 - a / a_k; negative means the method beats the tuned kNN reference."""
    if not knn_accuracy > 0:
        raise ParameterError(f"Reference kNN accuracy must be positive, got {knn_accuracy}")
    return 1.0 - accuracy / knn_accuracy


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in y_true."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise DataError("Cannot score an empty prediction set")
    recalls = [np.mean(y_pred[y_true == label] == label) for label in np.unique(y_true)]
    return float(np.mean(recalls))

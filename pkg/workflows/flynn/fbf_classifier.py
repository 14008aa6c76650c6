"""Fly Bloom Filter classifier: per-class decaying filters over FlyHash codes.

Training stores integer per-class bit counts c_l; the filter value of bit i is
gamma ** c_l[i], and inference returns the class with the smallest novelty
score sigma_l = sum of w_l over the query's set bits. Counts are kept instead
of filter values so that federated aggregation is an exact integer sum and a
whole gamma grid can be evaluated from one pass of hashing.
"""

import struct
import zlib
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from functools import cached_property
from pathlib import Path

import numpy as np

from .core_hash import HashParams, SparseBitVector, make_fly_hasher, make_sim_hasher
from .data import Dataset
from .errors import DataError, DimensionError, ModelFormatError, ParameterError
from .utils import decode_varint, encode_varint, get_logger

logger = get_logger(__name__)

MODEL_MAGIC = b"FLYNNMDL"
FORMAT_VERSION = 1
HASH_KINDS = {"flyhash": 0, "simhash": 1}
_HEADER = struct.Struct(">8sHBBQQQQQIQ")
_CRC = struct.Struct(">I")


def parse_gamma(value) -> tuple:
    """Return (exact decimal text, float) for a decay rate in [0, 1)."""
    text = value if isinstance(value, str) else repr(float(value)) if isinstance(value, float) else str(value)
    text = text.strip()
    try:
        exact = Decimal(text)
    except InvalidOperation as e:
        raise ParameterError(f"gamma must be a decimal number, got {value!r}") from e
    if not exact.is_finite() or not Decimal(0) <= exact < Decimal(1):
        raise ParameterError(f"gamma must be in [0, 1), got {text}")
    return text, float(text)


@dataclass(frozen=True, eq=False)
class ClassCounts:
    """Per-class bit counts, an (L, m) array.

    Integer counts come from training; real counts come from the DP mechanism.
    """

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ParameterError(f"Class counts must be an (L, m) array, got shape {counts.shape}")
        if np.issubdtype(counts.dtype, np.integer):
            counts = counts.astype(np.int64, copy=False)
        else:
            counts = counts.astype(np.float64, copy=False)
            if not np.isfinite(counts).all():
                raise ParameterError("Class counts must be finite")
        if (counts < 0).any():
            raise ParameterError("Class counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassCounts):
            return NotImplemented
        return self.is_integer == other.is_integer and np.array_equal(self.counts, other.counts)

    @classmethod
    def zeros(cls, L: int, m: int) -> "ClassCounts":
        return cls(np.zeros((L, m), dtype=np.int64))

    @property
    def L(self) -> int:
        return self.counts.shape[0]

    @property
    def m(self) -> int:
        return self.counts.shape[1]

    @property
    def is_integer(self) -> bool:
        return self.counts.dtype == np.int64

    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.counts))


def merge_counts(a: ClassCounts, b: ClassCounts) -> ClassCounts:
    """Elementwise sum of two count tables with identical shape."""
    if a.counts.shape != b.counts.shape:
        raise ParameterError(
            f"Cannot merge class counts of shapes {a.counts.shape} and {b.counts.shape}"
        )
    return ClassCounts(a.counts + b.counts)


def pack_counts(counts: ClassCounts) -> bytes:
    """Varint-pack an integer count table, row-major."""
    if not counts.is_integer:
        raise ParameterError("Only integer counts can be varint-packed")
    return b"".join(encode_varint(int(c)) for c in counts.counts.ravel())


def unpack_counts(buffer: bytes, offset: int, L: int, m: int) -> tuple:
    values = np.empty(L * m, dtype=np.int64)
    for i in range(L * m):
        values[i], offset = decode_varint(buffer, offset)
    return ClassCounts(values.reshape(L, m)), offset


def _make_hasher(hash_kind: str, m: int, d: int, s: int, rho: int, seed: int):
    if hash_kind == "flyhash":
        return make_fly_hasher(HashParams(m=m, s=s, rho=rho, seed=seed), d)
    if hash_kind == "simhash":
        return make_sim_hasher(m, d, seed)
    raise ParameterError(f"Unknown hash kind '{hash_kind}'")


@dataclass(frozen=True, eq=False)
class FlyNNModel:
    """A trained classifier: hash description, gamma, class counts and label table.

    For SimHash models s and rho are stored as 0.
    """

    hash_kind: str
    m: int
    d: int
    s: int
    rho: int
    seed: int
    gamma_text: str
    counts: ClassCounts
    labels: tuple

    def __post_init__(self):
        if self.hash_kind not in HASH_KINDS:
            raise ParameterError(f"Unknown hash kind '{self.hash_kind}'")
        if self.counts.m != self.m or self.counts.L != len(self.labels):
            raise ParameterError(
                f"Counts of shape {self.counts.counts.shape} do not match m={self.m}, L={len(self.labels)}"
            )
        parse_gamma(self.gamma_text)

    @property
    def gamma(self) -> float:
        return float(self.gamma_text)

    @property
    def L(self) -> int:
        return len(self.labels)

    @property
    def params(self) -> HashParams:
        return HashParams(m=self.m, s=self.s, rho=self.rho, seed=self.seed)

    @cached_property
    def hasher(self):
        return _make_hasher(self.hash_kind, self.m, self.d, self.s, self.rho, self.seed)

    @cached_property
    def weights(self) -> np.ndarray:
        """Filter values gamma ** c, with 0 ** 0 = 1."""
        return np.power(self.gamma, self.counts.counts.astype(np.float64))

    def same_as(self, other: "FlyNNModel") -> bool:
        return (
            (self.hash_kind, self.m, self.d, self.s, self.rho, self.seed, self.gamma_text, self.labels)
            == (other.hash_kind, other.m, other.d, other.s, other.rho, other.seed, other.gamma_text, other.labels)
            and self.counts == other.counts
        )

    def _rebuild(self, gamma_text: str, counts: ClassCounts) -> "FlyNNModel":
        model = FlyNNModel(
            self.hash_kind, self.m, self.d, self.s, self.rho, self.seed, gamma_text, counts, self.labels
        )
        # the hash function does not depend on gamma or counts
        if "hasher" in self.__dict__:
            model.__dict__["hasher"] = self.__dict__["hasher"]
        return model

    def with_counts(self, counts: ClassCounts) -> "FlyNNModel":
        return self._rebuild(self.gamma_text, counts)

    def with_gamma(self, gamma) -> "FlyNNModel":
        text, _ = parse_gamma(gamma)
        return self._rebuild(text, self.counts)


@dataclass(frozen=True, eq=False)
class NoveltyScores:
    labels: tuple
    scores: np.ndarray

    @property
    def best(self) -> int:
        return int(np.argmin(self.scores))

    def as_dict(self) -> dict:
        return dict(zip(self.labels, self.scores.tolist()))


def accumulate_counts(hasher, X: np.ndarray, y: np.ndarray, L: int) -> ClassCounts:
    """Sum the hash masks of every training point into its class row."""
    counts = np.zeros((L, hasher.m), dtype=np.int64)
    if X.shape[0] == 0:
        return ClassCounts(counts)
    for start, mask in hasher.iter_masks(X):
        labels = y[start : start + mask.shape[0]]
        for label in np.unique(labels):
            counts[label] += mask[labels == label].sum(axis=0)
    return ClassCounts(counts)


def _validate_training_set(S: Dataset, allow_empty: bool = False):
    if S.n == 0 and not allow_empty:
        raise DataError("Cannot train on an empty dataset")
    if S.L == 0:
        raise DataError("Training set has an empty label table")
    if S.n and (S.y.min() < 0 or S.y.max() >= S.L):
        raise DataError("Training labels fall outside the label table")


def train(S: Dataset, params: HashParams, gamma, allow_empty: bool = False) -> FlyNNModel:
    """Train the Fly Bloom Filter classifier.

    Parameters:
    S : Dataset
        Training set; its label table becomes the model's.
    params : HashParams
        FlyHash parameters; the lifting matrix is derived from params.seed.
    gamma : str or float
        Decay rate in [0, 1). gamma = 0 gives a binary Bloom filter.
    allow_empty : bool, optional
        Permit an empty training set (a federated party with no rows), by default False.

    Returns:
    FlyNNModel
        The trained model.

    Raises:
    DataError
        If the dataset is empty or a label falls outside the label table.
    DimensionError
        If s exceeds the input dimension.
    """
    gamma_text, _ = parse_gamma(gamma)
    _validate_training_set(S, allow_empty)
    params.check_dimension(S.d)
    hasher = make_fly_hasher(params, S.d)
    counts = accumulate_counts(hasher, S.X, S.y, S.L)
    model = FlyNNModel(
        "flyhash", params.m, S.d, params.s, params.rho, params.seed, gamma_text, counts, S.labels
    )
    model.__dict__["hasher"] = hasher
    return model


def train_sbfc(S: Dataset, m: int, seed: int, gamma="0") -> FlyNNModel:
    """Train the SimHash Bloom filter baseline: dense Gaussian projection, sign bits, same filters."""
    gamma_text, _ = parse_gamma(gamma)
    _validate_training_set(S)
    if m < 1:
        raise ParameterError(f"m must be at least 1, got {m}")
    hasher = make_sim_hasher(m, S.d, seed)
    counts = accumulate_counts(hasher, S.X, S.y, S.L)
    model = FlyNNModel("simhash", m, S.d, 0, 0, seed, gamma_text, counts, S.labels)
    model.__dict__["hasher"] = hasher
    return model


def counts_for_hashes(S: Dataset, params: HashParams) -> tuple:
    """Hash the training set once; returns (hasher, counts) for reuse across a gamma grid."""
    _validate_training_set(S)
    hasher = make_fly_hasher(params, S.d)
    return hasher, accumulate_counts(hasher, S.X, S.y, S.L)


def model_from_counts(hasher, counts: ClassCounts, gamma, labels: tuple, seed: int) -> FlyNNModel:
    gamma_text, _ = parse_gamma(gamma)
    if hasher.kind == "flyhash":
        model = FlyNNModel(
            "flyhash", hasher.m, hasher.d, hasher.matrix.s, hasher.rho, seed, gamma_text, counts, labels
        )
    else:
        model = FlyNNModel("simhash", hasher.m, hasher.d, 0, 0, seed, gamma_text, counts, labels)
    model.__dict__["hasher"] = hasher
    return model


def novelty_scores_batch(model: FlyNNModel, X) -> np.ndarray:
    """(n, L) novelty scores.

    FlyHash codes are scored by gathering the rho filter values at each
    query's set bits, O(rho * L) per query once hashed. SimHash codes are
    dense and are scored with a mask-weight product. Every score is a sum of
    at most m terms in [0, 1] accumulated in float64; the absolute error is
    bounded by m * 2**-53 * sigma, far below the gap between distinct
    integer-valued scores at gamma = 0.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DimensionError(f"Model expects dimension {model.d}, got inputs of shape {X.shape}")
    W = model.weights
    out = np.empty((X.shape[0], model.L), dtype=np.float64)
    if model.hash_kind == "flyhash":
        for start, indices in model.hasher.iter_indices(X):
            out[start : start + indices.shape[0]] = W[:, indices].sum(axis=2).T
    else:
        for start, mask in model.hasher.iter_masks(X):
            out[start : start + mask.shape[0]] = mask.astype(np.float64) @ W.T
    return out


def novelty_scores(model: FlyNNModel, x) -> NoveltyScores:
    return NoveltyScores(model.labels, novelty_scores_batch(model, x)[0])


def predict(model: FlyNNModel, X) -> np.ndarray:
    """Internal label indices of the lowest-novelty class; ties go to the smallest index."""
    return np.argmin(novelty_scores_batch(model, X), axis=1)


def infer(model: FlyNNModel, x) -> tuple:
    """Classify one point; returns (label string, NoveltyScores)."""
    scores = novelty_scores(model, x)
    return model.labels[scores.best], scores


def accuracy(model: FlyNNModel, test: Dataset) -> float:
    if test.labels != model.labels:
        raise DataError("Test set label table differs from the model's")
    if test.n == 0:
        raise DataError("Cannot score an empty test set")
    return float(np.mean(predict(model, test.X) == test.y))


def score_hash(model: FlyNNModel, code: SparseBitVector) -> np.ndarray:
    """Novelty scores for an already computed hash code."""
    if code.length != model.m:
        raise DimensionError(f"Hash of length {code.length} does not match m={model.m}")
    return model.weights[:, code.ones].sum(axis=1)


def serialize(model: FlyNNModel) -> bytes:
    """Serialize to the versioned binary format.

    Layout (big-endian header): magic, version, hash kind, count mode
    (0 integer, 1 real), m, d, s, rho, seed, L, body length; then the body with
    the gamma text and label strings as varint-length UTF-8, the counts
    (varints or float64), and a CRC-32 of everything before it.
    """
    body = bytearray()
    for text in (model.gamma_text, *model.labels):
        raw = text.encode("utf-8")
        body += encode_varint(len(raw)) + raw
    if model.counts.is_integer:
        body += pack_counts(model.counts)
    else:
        body += model.counts.counts.astype(">f8").tobytes()
    header = _HEADER.pack(
        MODEL_MAGIC,
        FORMAT_VERSION,
        HASH_KINDS[model.hash_kind],
        0 if model.counts.is_integer else 1,
        model.m,
        model.d,
        model.s,
        model.rho,
        model.seed,
        model.L,
        len(body),
    )
    payload = header + bytes(body)
    return payload + _CRC.pack(zlib.crc32(payload))


def deserialize(blob: bytes) -> FlyNNModel:
    """Inverse of serialize.

    Raises:
    ModelFormatError
        On a bad magic or version, truncation, checksum failure or malformed body.
    """
    if len(blob) < _HEADER.size + _CRC.size:
        raise ModelFormatError(f"Model file truncated: {len(blob)} bytes is shorter than the header")
    magic, version, kind, mode, m, d, s, rho, seed, L, body_length = _HEADER.unpack_from(blob, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError("Not a model file (bad magic)")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"Unsupported model format version {version}, expected {FORMAT_VERSION}")
    expected = _HEADER.size + body_length + _CRC.size
    if len(blob) < expected:
        raise ModelFormatError(f"Model file truncated: expected {expected} bytes, got {len(blob)}")
    if len(blob) > expected:
        raise ModelFormatError(f"Trailing bytes after model: expected {expected}, got {len(blob)}")
    payload = blob[: _HEADER.size + body_length]
    (checksum,) = _CRC.unpack_from(blob, len(payload))
    if zlib.crc32(payload) != checksum:
        raise ModelFormatError("Model checksum mismatch")

    kinds = {code: name for name, code in HASH_KINDS.items()}
    if kind not in kinds or mode not in (0, 1):
        raise ModelFormatError(f"Unknown hash kind {kind} or count mode {mode}")

    offset = _HEADER.size
    texts = []
    try:
        for _ in range(L + 1):
            size, offset = decode_varint(payload, offset)
            if offset + size > len(payload):
                raise ModelFormatError("Label text runs past the end of the body")
            texts.append(payload[offset : offset + size].decode("utf-8"))
            offset += size
        if mode == 0:
            counts, offset = unpack_counts(payload, offset, L, m)
        else:
            size = L * m * 8
            if offset + size > len(payload):
                raise ModelFormatError("Real-valued counts run past the end of the body")
            counts = ClassCounts(np.frombuffer(payload, dtype=">f8", count=L * m, offset=offset).astype(np.float64).reshape(L, m))
            offset += size
    except UnicodeDecodeError as e:
        raise ModelFormatError(f"Label text is not UTF-8: {e}") from e
    except ParameterError as e:
        raise ModelFormatError(f"Invalid counts in model file: {e}") from e
    if offset != len(payload):
        raise ModelFormatError("Model body has unparsed bytes")
    try:
        return FlyNNModel(kinds[kind], m, d, s, rho, seed, texts[0], counts, tuple(texts[1:]))
    except ParameterError as e:
        raise ModelFormatError(f"Inconsistent model file: {e}") from e


def save_model(model: FlyNNModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(model))
    logger.info(f"[SAVED] model ({model.hash_kind}, m={model.m}, L={model.L}) to {path}")
    return path


def load_model(path) -> FlyNNModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Model file not found: {path}")
    return deserialize(path.read_bytes())

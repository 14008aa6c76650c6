"""Monte-Carlo and exact estimators for the random-projection quantities behind FlyHash.

A row theta of the lifting matrix is a uniform s-hot vector. For a point x,
the top f-fractile tau_x(f) is the largest v with P(theta . x >= v) >= f, and
q(x, x') is the probability that theta . x' clears tau_x'(rho/m) given that
theta . x clears tau_x(rho/m). When C(d, s) is small enough every theta is
enumerated and the quantities are exact; otherwise they are estimated from
i.i.d. draws with Wilson score intervals.
"""

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import binomtest, norm

from .core_hash import STREAM_THEORY, HashParams, RngState, sample_subsets
from .data import Dataset
from .errors import ParameterError
from .fbf_classifier import predict, train
from .knn_baseline import Similarity, knn_predict, kth_nn_distance, margin
from .utils import get_logger

logger = get_logger(__name__)

EXACT_LIMIT = 100_000
MIN_SAMPLES = 1_000
# Floating slack when turning f * N into a rank.
RANK_SLACK = 1e-9

METHODS = ("auto", "exact", "monte-carlo")


class ThetaSampler:
    """Uniform draws of s-hot vectors in {0, 1}^d, represented by their index sets."""

    def __init__(self, d: int, s: int, rng: RngState):
        if not 1 <= s <= d:
            raise ParameterError(f"s must be in [1, d={d}], got {s}")
        self.d = d
        self.s = s
        self.rng = rng

    def draw(self, count: int) -> np.ndarray:
        """(count, s) sorted index sets."""
        return sample_subsets(self.rng, count, self.d, self.s)

    def dense(self, count: int) -> np.ndarray:
        thetas = np.zeros((count, self.d), dtype=np.int8)
        np.put_along_axis(thetas, self.draw(count), 1, axis=1)
        return thetas


def all_subsets(d: int, s: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(d), s)), dtype=np.int64).reshape(-1, s)


def _support(d: int, s: int, samples: int, method: str, seed: int) -> tuple:
    """Index sets to evaluate and whether they are the complete enumeration."""
    if method not in METHODS:
        raise ParameterError(f"Unknown method '{method}', expected one of {METHODS}")
    if not 1 <= s <= d:
        raise ParameterError(f"s must be in [1, d={d}], got {s}")
    size = math.comb(d, s)
    if method == "exact" or (method == "auto" and size <= EXACT_LIMIT):
        if size > EXACT_LIMIT:
            raise ParameterError(f"C({d}, {s}) = {size} exceeds the enumeration limit {EXACT_LIMIT}")
        return all_subsets(d, s), True
    if samples < MIN_SAMPLES:
        raise ParameterError(f"Monte-Carlo estimates need at least {MIN_SAMPLES} samples, got {samples}")
    return ThetaSampler(d, s, RngState(seed, STREAM_THEORY)).draw(samples), False


def _rank(f: float, count: int) -> int:
    return min(count, max(1, math.ceil(f * count - RANK_SLACK)))


def fractile_of(values: np.ndarray, f: float) -> float:
    """Largest v with at least a fraction f of `values` at or above v."""
    values = np.asarray(values, dtype=np.float64)
    r = _rank(f, values.size)
    return float(-np.partition(-values, r - 1)[r - 1])


def _check_fraction(f: float):
    if not 0 < f <= 1:
        raise ParameterError(f"Fraction must be in (0, 1], got {f}")


def estimate_fractile(x, f: float, samples: int = 10_000, s: int = 2, seed: int = 0, method: str = "auto") -> float:
    """Top f-fractile of theta . x over uniform s-hot theta.

    Parameters:
    x : array-like
        The point.
    f : float
        Fraction in (0, 1].
    samples : int, optional
        Monte-Carlo draws, at least 1000, by default 10000.
    s : int, optional
        Ones per theta, by default 2.
    seed : int, optional
        Seed of the theta draws, by default 0.
    method : str, optional
        'exact', 'monte-carlo', or 'auto' (exact when C(d, s) <= 1e5), by default 'auto'.

    Returns:
    float
        The fractile value.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_fraction(f)
    thetas, _ = _support(x.size, s, samples, method, seed)
    return fractile_of(x[thetas].sum(axis=1), f)


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple:
    if trials == 0:
        return 0.0, 1.0
    ci = binomtest(int(successes), int(trials)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass(frozen=True)
class QEstimate:
    """Conditional collision probability with its interval; value is NaN when nothing was conditioned on."""

    value: float
    low: float
    high: float
    hits: int
    conditioned: int
    exact: bool


def estimate_q(
    x, x_prime, rho: int, m: int, samples: int = 20_000, s: int = 2, seed: int = 0, method: str = "auto",
    confidence: float = 0.95,
) -> QEstimate:
    """Estimate q(x, x') with thresholds at the rho/m fractile of each point.

    Both thresholds and both events are evaluated on the same thetas, so
    q(x, x) is exactly 1.
    """
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape:
        raise ParameterError(f"Points differ in shape: {x.shape} vs {x_prime.shape}")
    if not 1 <= rho <= m:
        raise ParameterError(f"rho must be in [1, m={m}], got {rho}")
    f = rho / m
    thetas, exact = _support(x.size, s, samples, method, seed)
    first = x[thetas].sum(axis=1)
    second = x_prime[thetas].sum(axis=1)
    given = first >= fractile_of(first, f)
    both = given & (second >= fractile_of(second, f))
    conditioned = int(given.sum())
    hits = int(both.sum())
    if conditioned == 0:
        return QEstimate(float("nan"), 0.0, 1.0, 0, 0, exact)
    value = hits / conditioned
    low, high = (value, value) if exact else wilson_interval(hits, conditioned, confidence)
    return QEstimate(value, low, high, hits, conditioned, exact)


def slack_pair(x, rho: int, m: int, s: int, rng: RngState, samples: int = 20_000, method: str = "auto") -> tuple:
    """A point x' >= x - delta / s (componentwise) with delta = (tau_x(rho/2m) - tau_x(rho/m)) / 2.

    Returns (x', delta). The perturbation is a uniform fraction of the allowed slack per coordinate.
    """
    x = np.asarray(x, dtype=np.float64)
    seed = rng.seed
    delta = 0.5 * (
        estimate_fractile(x, rho / (2 * m), samples, s, seed, method)
        - estimate_fractile(x, rho / m, samples, s, seed, method)
    )
    return x - (delta / s) * rng.random(x.size), delta


@dataclass(frozen=True)
class MeanEstimate:
    mean: float
    low: float
    high: float
    trials: int


def _trial_points(rng: RngState, trials: int, d: int, distribution: str) -> np.ndarray:
    if distribution == "gaussian":
        return rng.generator.standard_normal((trials, d))
    if distribution == "uniform":
        return rng.generator.uniform(-1.0, 1.0, (trials, d))
    raise ParameterError(f"Unknown distribution '{distribution}', expected 'gaussian' or 'uniform'")


def permutation_invariant_q_check(
    x_prime, rho: int, m: int, trials: int = 10_000, s: int = 2, seed: int = 0, distribution: str = "gaussian",
    confidence: float = 0.95,
) -> MeanEstimate:
    """Mean of q(x, x') over x drawn from a permutation-invariant distribution.

    Every theta is enumerated, so each q(x, x') is exact and the interval only
    reflects the sampling of x. With exact enumeration of N thetas the mean
    converges to ceil(f N) / N, which equals rho / m when f N is an integer.
    """
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if not 1 <= rho <= m:
        raise ParameterError(f"rho must be in [1, m={m}], got {rho}")
    thetas, _ = _support(x_prime.size, s, 0, "exact", seed)
    f = rho / m
    r = _rank(f, thetas.shape[0])
    second = x_prime[thetas].sum(axis=1)
    hit = second >= fractile_of(second, f)

    rng = RngState(seed, STREAM_THEORY)
    q = np.empty(trials, dtype=np.float64)
    block = max(1, (1 << 20) // thetas.shape[0])
    for start in range(0, trials, block):
        count = min(block, trials - start)
        points = _trial_points(rng, count, x_prime.size, distribution)
        values = points[:, thetas].sum(axis=2)
        thresholds = -np.partition(-values, r - 1, axis=1)[:, r - 1 : r]
        given = values >= thresholds
        q[start : start + count] = (given & hit).sum(axis=1) / given.sum(axis=1)
    mean = float(q.mean())
    half = float(norm.ppf(0.5 + confidence / 2) * q.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return MeanEstimate(mean, mean - half, mean + half, trials)


@dataclass(frozen=True)
class MarginSpec:
    """Two-class data around random prototypes with bounded l-infinity noise.

    Training points are prototype + U[-spread, spread]^d; test points are
    training points plus U[-query_radius, query_radius]^d perturbations.
    """

    n: int = 40
    d: int = 10
    class_sep: float = 4.0
    spread: float = 0.5
    query_radius: float = 0.05
    seed: int = 0


def margin_dataset(spec: MarginSpec) -> Dataset:
    rng = RngState(spec.seed, STREAM_THEORY)
    prototypes = rng.generator.uniform(-spec.class_sep / 2, spec.class_sep / 2, (2, spec.d))
    y = np.arange(spec.n) % 2
    X = prototypes[y] + rng.generator.uniform(-spec.spread, spec.spread, (spec.n, spec.d))
    return Dataset(X, y, ("0", "1"), f"margin(n={spec.n},d={spec.d},sep={spec.class_sep},seed={spec.seed})")


@dataclass(frozen=True)
class AgreementResult:
    m: int
    s: int
    rho: int
    k: int
    trials: int
    agreement: float
    precondition_rate: float
    agreement_given_precondition: float


def agreement_experiment(
    spec: MarginSpec, params: HashParams, k: int = 1, trials: int = 200, precondition_constant: float = 1.0
) -> AgreementResult:
    """Agreement between FlyNN (gamma = 0) and kNN on perturbed training points.

    The precondition is that the distance to the ceil((k+1)/2)-th nearest
    training point is at most min(eta / 2, c / s) in l-infinity.
    """
    S = margin_dataset(spec)
    eta = margin(S)
    rng = RngState(spec.seed, STREAM_THEORY).spawn(STREAM_THEORY + 1)
    anchors = rng.generator.integers(0, S.n, trials)
    queries = S.X[anchors] + rng.generator.uniform(-spec.query_radius, spec.query_radius, (trials, spec.d))

    model = train(S, params, "0")
    fly = predict(model, queries)
    knn = knn_predict(S, queries, [k], Similarity.NEGATIVE_LINF)[k]
    agree = fly == knn

    bound = min(eta / 2, precondition_constant / params.s)
    neighbour = math.ceil((k + 1) / 2)
    holds = np.array([kth_nn_distance(S, query, neighbour, "chebyshev") <= bound for query in queries])
    given = float(agree[holds].mean()) if holds.any() else float("nan")
    return AgreementResult(
        m=params.m,
        s=params.s,
        rho=params.rho,
        k=k,
        trials=trials,
        agreement=float(agree.mean()),
        precondition_rate=float(holds.mean()),
        agreement_given_precondition=given,
    )


def agreement_curve(spec: MarginSpec, ms, s: int, rho: int, k: int = 1, trials: int = 200, seeds=(0,)) -> pd.DataFrame:
    """Agreement for every m in `ms`, averaged over lifting-matrix seeds."""
    rows = []
    for m in ms:
        results = [agreement_experiment(spec, HashParams(m=m, s=s, rho=rho, seed=seed), k, trials) for seed in seeds]
        rows.append(
            {
                "m": m,
                "agreement": float(np.mean([r.agreement for r in results])),
                "precondition_rate": float(np.mean([r.precondition_rate for r in results])),
            }
        )
        logger.debug(f"\tagreement at m={m}: {rows[-1]['agreement']:.3f}")
    return pd.DataFrame(rows)


def oracle_row(experiment_id: str, params: dict, estimate: float, low: float, high: float) -> dict:
    return {
        "experiment_id": experiment_id,
        "params": json.dumps(params, sort_keys=True),
        "estimate": estimate,
        "ci_low": low,
        "ci_high": high,
    }


def write_oracle_rows(rows: list, path):
    pd.DataFrame(rows, columns=["experiment_id", "params", "estimate", "ci_low", "ci_high"]).to_csv(path, index=False)


def q_estimate_row(experiment_id: str, estimate: QEstimate, **params) -> dict:
    details = {**params, "hits": estimate.hits, "conditioned": estimate.conditioned, "exact": estimate.exact}
    return oracle_row(experiment_id, details, estimate.value, estimate.low, estimate.high)

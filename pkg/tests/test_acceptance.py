"""End-to-end acceptance runs. They take minutes and are deselected unless `-m slow` is given."""

import os
import time

import numpy as np
import pandas as pd
import pytest
from scipy.stats import chisquare

from workflows.experiments.config import load_config
from workflows.experiments.experiment_workflows import cmd_bench, cmd_dp_sweep, cmd_scale
from workflows.flynn.core_hash import HashParams, RngState, fly_hash, gen_lifting_matrix
from workflows.flynn.data import Dataset, SynthSpec, make_classification, shard, train_test_split
from workflows.flynn.dp_mechanism import DPParams, privatize, sample_laplace, selection_probabilities
from workflows.flynn.federated import FederationPlan, train_flynn_fl
from workflows.flynn.fbf_classifier import accuracy, train
from workflows.flynn.knn_baseline import knn_predict
from workflows.flynn.theory_oracle import (
    MarginSpec,
    agreement_curve,
    agreement_experiment,
    estimate_q,
    slack_pair,
    permutation_invariant_q_check,
)

pytestmark = pytest.mark.slow

WORKERS = max(1, min(8, os.cpu_count() or 1))


def test_federated_counts_equal_pooled_counts_on_random_cases():
    rng = np.random.default_rng(2024)
    for case in range(50):
        tau = (1, 2, 4, 8, 16)[case % 5]
        policy = "by-class" if case % 2 else "round-robin"
        d = int(rng.integers(4, 21))
        dataset = make_classification(
            SynthSpec(
                n=int(rng.integers(32, 301)),
                d=d,
                n_classes=int(rng.integers(2, 7)),
                clusters_per_class=1,
                seed=int(rng.integers(2**32)),
            )
        )
        m = int(rng.integers(16, 513))
        params = HashParams(m=m, s=int(rng.integers(1, d + 1)), rho=int(rng.integers(1, m + 1)), seed=int(rng.integers(2**63)))
        result = train_flynn_fl(FederationPlan(tuple(shard(dataset, tau, policy)), params, gamma="0.5", timeout=30.0))
        pooled = train(dataset, params, "0.5")
        for model in result.models:
            np.testing.assert_array_equal(model.counts.counts, pooled.counts.counts)


def test_hash_invariants_on_random_cases():
    rng = np.random.default_rng(7)
    for case in range(10_000):
        d = int(rng.integers(1, 33))
        m = int(rng.integers(1, 129))
        s = int(rng.integers(1, d + 1))
        rho = int(rng.integers(1, m + 1))
        M = gen_lifting_matrix(RngState(case), m, d, s)
        assert M.rows.shape == (m, s)
        assert (np.diff(M.rows, axis=1) > 0).all()

        x = rng.standard_normal(d)
        code = fly_hash(M, rho, x)
        assert code.ones.size == rho
        scale = float(rng.uniform(0.1, 10.0))
        assert fly_hash(M, rho, scale * x) == code


@pytest.mark.parametrize("rho", [1, 5, 10])
def test_mean_collision_probability_is_rho_over_m(rho):
    m = 100
    x_prime = np.random.default_rng(rho).standard_normal(40)
    result = permutation_invariant_q_check(x_prime, rho=rho, m=m, trials=10_000, s=2, seed=rho)
    assert result.mean == pytest.approx(rho / m, rel=0.2)


def test_slack_pairs_have_wilson_lower_bound_above_half():
    rho, m, s = 10, 100, 2
    passed = 0
    for case in range(100):
        x = np.random.default_rng(case).standard_normal(40)
        x_prime, _ = slack_pair(x, rho, m, s, RngState(case))
        estimate = estimate_q(x, x_prime, rho=rho, m=m, s=s)
        passed += estimate.low >= 0.5
    assert passed >= 95


def test_exponential_mechanism_selection_frequencies():
    c = np.array([2, 1, 0])
    params = DPParams(epsilon=1.0, T=1)
    scale = 2.0 * params.T / params.epsilon
    trials = 100_000
    rng = RngState(11)
    observed = np.zeros(4, dtype=np.int64)
    for _ in range(trials):
        released = privatize(c, params, rng)
        observed[released.indices[0] if released.nnz else 3] += 1

    p = selection_probabilities(c, params.epsilon, params.T)
    np.testing.assert_allclose(p, np.exp(c / 4.0) / np.exp(c / 4.0).sum())
    # a selected entry survives unless its noisy value is clipped to zero
    survive = 1.0 - 0.5 * np.exp(-c / scale)
    released_share = observed[:3] / trials
    np.testing.assert_allclose(released_share / survive, p, atol=0.01)

    expected = np.append(p * survive, 1.0 - (p * survive).sum()) * trials
    assert chisquare(observed, expected).pvalue > 1e-3


def test_laplace_sampler_moments():
    rng = RngState(5)
    draws = np.array([sample_laplace(3.0, rng) for _ in range(1_000_000)])
    assert abs(draws.mean()) < 0.02
    assert np.abs(draws).mean() == pytest.approx(3.0, abs=0.02)


def test_bench_reproduces_the_table_direction(tmp_path):
    config = load_config(overrides=[f"output={tmp_path / 'bench.csv'}", f"workers={WORKERS}"], experiment="bench")
    summary = cmd_bench(config).summary.set_index("method")["normalized_accuracy_mean"]
    assert summary["flynn"] <= 0.02
    assert summary["sbfc"] >= summary["flynn"] + 0.10
    assert summary["1nn"] >= summary["flynn"]


@pytest.mark.skipif((os.cpu_count() or 1) < 8, reason="scaling needs at least 8 cores")
def test_scaling_speedup(tmp_path):
    config = load_config(
        overrides=["federation.parties=[1, 2, 4]", "repetitions=3", f"output={tmp_path / 'scale.csv'}"],
        experiment="scale",
    )
    table = cmd_scale(config).summary.set_index("parties")["speedup_mean"]
    assert table[4] >= 2.0
    assert table[1] <= table[2] <= table[4]


def test_dp_accuracy_trends(tmp_path):
    config = load_config(
        overrides=["flynn.m=[300]", "flynn.rho=[15]", f"workers={WORKERS}", f"output={tmp_path / 'dp.csv'}"],
        experiment="dp-sweep",
    )
    curve = cmd_dp_sweep(config).summary

    at_one = curve[curve["epsilon"] == 1.0].sort_values("T")
    peak = at_one.loc[at_one["accuracy_mean"].idxmax()]
    first, last = at_one.iloc[0], at_one.iloc[-1]
    assert first["T"] < peak["T"] < last["T"]
    assert peak["accuracy_mean"] > first["accuracy_mean"]
    assert peak["accuracy_mean"] > last["accuracy_mean"]

    best = curve[curve["best"]].sort_values("epsilon")
    accuracies = best["accuracy_mean"].to_numpy()
    assert (np.diff(accuracies) >= -0.01).all()
    at_two = best[best["epsilon"] == 2.0].iloc[0]
    assert at_two["accuracy_mean"] >= at_two["non_dp_accuracy"] - 0.03


def test_agreement_with_nearest_neighbour():
    spec = MarginSpec(n=20, d=20, class_sep=4.0, spread=0.3, query_radius=0.05, seed=3)
    rho, s = 8, 2
    largest = 2**14
    assert largest / spec.n >= 100 * rho
    result = agreement_experiment(spec, HashParams(m=largest, s=s, rho=rho, seed=0), trials=200)
    assert result.precondition_rate > 0
    assert result.agreement_given_precondition >= 0.9

    ms = [2**i for i in range(6, 15, 2)]
    curve: pd.DataFrame = agreement_curve(spec, ms, s=s, rho=rho, trials=200, seeds=(0, 1, 2))
    agreement = curve.sort_values("m")["agreement"].to_numpy()
    assert (np.diff(agreement) >= -0.05).all()
    assert curve["m"].max() == largest


def _fastest_training_seconds(dataset, params, runs: int = 3) -> float:
    best = np.inf
    for _ in range(runs):
        start = time.perf_counter()
        train(dataset, params, "0")
        best = min(best, time.perf_counter() - start)
    return best


def test_training_time_grows_about_linearly_in_n_and_m():
    big = make_classification(SynthSpec(n=16_000, d=20, n_classes=2, clusters_per_class=1, seed=1))
    sizes = np.array([2_000, 4_000, 8_000, 16_000])
    by_n = [_fastest_training_seconds(big.subset(np.arange(n)), HashParams(m=1024, s=4, rho=32, seed=0)) for n in sizes]
    ms = np.array([512, 1024, 2048, 4096])
    by_m = [_fastest_training_seconds(big.subset(np.arange(4_000)), HashParams(m=m, s=4, rho=32, seed=0)) for m in ms]
    for x, seconds in ((sizes, by_n), (ms, by_m)):
        slope = np.polyfit(np.log(x), np.log(seconds), 1)[0]
        assert 0.5 <= slope <= 2.0


def _least_squares_accuracy(train_set, test_set) -> float:
    def design(X):
        return np.hstack([X, np.ones((X.shape[0], 1))])

    targets = np.eye(train_set.L)[train_set.y]
    coefficients, *_ = np.linalg.lstsq(design(train_set.X), targets, rcond=None)
    return float(np.mean(np.argmax(design(test_set.X) @ coefficients, axis=1) == test_set.y))


def test_nearest_neighbours_beat_a_linear_classifier_on_clustered_data():
    dataset = make_classification(
        SynthSpec(n=1000, d=50, n_classes=5, clusters_per_class=3, class_sep=4.0, n_informative=4, seed=0)
    )
    train_set, test_set = train_test_split(dataset, 0.2, seed=0)
    predictions = knn_predict(train_set, test_set.X, [1, 5, 15])
    best_knn = max(float(np.mean(labels == test_set.y)) for labels in predictions.values())
    assert best_knn >= _least_squares_accuracy(train_set, test_set) + 0.05


def _block_data(n: int, rng) -> Dataset:
    y = np.arange(n) % 2
    X = 0.3 * rng.standard_normal((n, 8))
    X[y == 0, :4] += 5.0
    X[y == 1, 4:] += 5.0
    return Dataset(X, y, ("0", "1"))


def test_private_federation_stays_close_to_the_non_private_one():
    rng = np.random.default_rng(12)
    train_set, test_set = _block_data(16_000, rng), _block_data(1_000, rng)
    params = HashParams(m=256, s=2, rho=32, seed=4)
    shards = tuple(shard(train_set, 2))
    plain = train_flynn_fl(FederationPlan(shards, params, gamma="0.5", timeout=60.0)).model
    private = train_flynn_fl(
        FederationPlan(shards, params, gamma="0.5", dp=DPParams(2.0, params.m * 2), dp_seed=1, timeout=60.0)
    ).model
    assert accuracy(private, test_set) >= accuracy(plain, test_set) - 0.05

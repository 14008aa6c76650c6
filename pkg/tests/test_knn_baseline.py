import itertools

import numpy as np
import pytest

from workflows.flynn.data import Dataset
from workflows.flynn.errors import DataError, DimensionError, ParameterError
from workflows.flynn.knn_baseline import (
    Similarity,
    knn_classify,
    knn_predict,
    kth_nn_distance,
    margin,
    neighbour_order,
    similarity,
)


def _random_two_class(n: int, d: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, d)), np.arange(n) % 2, ("0", "1"))


def test_k1_returns_label_of_most_similar_point(tiny_dataset):
    assert knn_classify(tiny_dataset, [4.8, 5.1], 1) == "b"
    assert knn_classify(tiny_dataset, [0.05, 0.0], 1) == "a"


@pytest.mark.parametrize("kind", list(Similarity))
def test_training_point_is_its_own_nearest_neighbour(kind):
    S = _random_two_class(30, 4, seed=2)
    order = neighbour_order(S, S.X, 1, kind)
    np.testing.assert_array_equal(order[:, 0], np.arange(30))


def test_k3_matches_exhaustive_subset_enumeration():
    S = _random_two_class(20, 3, seed=7)
    queries = np.random.default_rng(8).standard_normal((10, 3))
    predicted = knn_predict(S, queries, [3])[3]
    for query, label in zip(queries, predicted):
        sims = similarity(query, S.X)[0]
        best = max(itertools.combinations(range(S.n), 3), key=lambda subset: sims[list(subset)].sum())
        votes = np.bincount(S.y[list(best)], minlength=2)
        assert label == np.argmax(votes)


def test_one_ranking_serves_every_k():
    S = _random_two_class(40, 5, seed=1)
    X = np.random.default_rng(3).standard_normal((15, 5))
    together = knn_predict(S, X, [1, 5, 9])
    for k in (1, 5, 9):
        np.testing.assert_array_equal(together[k], knn_predict(S, X, [k])[k])


def test_vote_ties_go_to_smaller_class():
    S = Dataset(np.array([[0.0], [1.0]]), [1, 0], ("0", "1"))
    assert knn_classify(S, [0.2], 2) == "0"


def test_cosine_similarity_with_zero_vector():
    np.testing.assert_array_equal(similarity([0.0, 0.0], [[1.0, 2.0]], Similarity.COSINE), [[0.0]])


def test_knn_argument_checks(tiny_dataset):
    with pytest.raises(ParameterError):
        knn_classify(tiny_dataset, [0.0, 0.0], 5)
    with pytest.raises(DimensionError):
        knn_classify(tiny_dataset, [0.0, 0.0, 0.0], 1)
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), ("a",))
    with pytest.raises(DataError):
        knn_classify(empty, [0.0, 0.0], 1)


def test_margin_of_single_pair():
    S = Dataset(np.array([[0.0, 0.0], [1.0, 3.0]]), [0, 1], ("0", "1"))
    assert margin(S) == 3.0


def test_margin_is_zero_for_duplicated_point():
    S = Dataset(np.array([[0.5, 0.5], [0.5, 0.5], [2.0, 2.0]]), [0, 1, 1], ("0", "1"))
    assert margin(S) == 0.0


def test_margin_matches_double_loop():
    S = _random_two_class(50, 4, seed=12)
    expected = min(
        np.max(np.abs(a - b))
        for a, ya in zip(S.X, S.y)
        for b, yb in zip(S.X, S.y)
        if ya != yb
    )
    assert margin(S) == pytest.approx(expected, abs=0)


def test_margin_needs_two_classes():
    S = Dataset(np.zeros((3, 2)), [0, 0, 0], ("0", "1"))
    with pytest.raises(DataError):
        margin(S)


def test_kth_nn_distance():
    S = Dataset(np.array([[1.0], [2.0], [3.0]]), [0, 0, 1], ("0", "1"))
    assert kth_nn_distance(S, [0.0], 2) == 2.0
    assert kth_nn_distance(S, [2.0], 1) == 0.0


def test_kth_nn_distance_matches_full_sort():
    S = _random_two_class(60, 6, seed=4)
    x = np.random.default_rng(5).standard_normal(6)
    distances = np.sort(np.max(np.abs(S.X - x), axis=1))
    for k in (1, 7, 60):
        assert kth_nn_distance(S, x, k) == distances[k - 1]


def test_k_equal_to_n_predicts_the_most_frequent_label():
    rng = np.random.default_rng(21)
    y = np.array([0] * 3 + [1] * 5 + [2] * 5)
    S = Dataset(rng.standard_normal((13, 3)), y, ("a", "b", "c"))
    queries = rng.standard_normal((8, 3))
    np.testing.assert_array_equal(knn_predict(S, queries, [13])[13], np.ones(8, dtype=np.int64))
    assert knn_classify(S, queries[0], 13) == "b"


def test_margin_ignores_which_class_is_which():
    S = _random_two_class(40, 3, seed=30)
    swapped = Dataset(S.X, 1 - S.y, S.labels)
    assert margin(swapped) == margin(S)


def test_predictions_do_not_depend_on_training_order():
    S = _random_two_class(80, 4, seed=31)
    queries = np.random.default_rng(32).standard_normal((25, 4))
    order = np.random.default_rng(33).permutation(S.n)
    shuffled = knn_predict(S.subset(order), queries, [1, 3, 5])
    original = knn_predict(S, queries, [1, 3, 5])
    for k in (1, 3, 5):
        np.testing.assert_array_equal(shuffled[k], original[k])

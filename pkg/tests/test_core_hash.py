import numpy as np
import pytest

from workflows.flynn import core_hash
from workflows.flynn.core_hash import (
    STREAM_LIFTING,
    FlyHasher,
    HashParams,
    LiftingMatrix,
    RngState,
    SparseBitVector,
    fly_hash,
    gen_gaussian_matrix,
    gen_lifting_matrix,
    make_fly_hasher,
    sim_hash,
    winner_take_all,
)
from workflows.flynn.errors import DimensionError, ParameterError


def test_rng_matches_philox_keyed_by_seed_and_stream():
    expected = np.random.Generator(np.random.Philox(key=np.array([42, 7], dtype=np.uint64))).random(5)
    np.testing.assert_array_equal(RngState(42, 7).random(5), expected)


def test_rng_same_seed_same_sequence():
    a, b = RngState(0), RngState(0)
    np.testing.assert_array_equal(a.random(1000), b.random(1000))


def test_rng_different_seeds_differ():
    assert RngState(0).next_uint64() != RngState(1).next_uint64()
    assert RngState(0, 1).next_uint64() != RngState(0, 2).next_uint64()


def test_rng_copies_advance_independently():
    rng = RngState(9)
    rng.random(3)
    first, second = rng.copy(), rng.copy()
    np.testing.assert_array_equal(first.random(10), second.random(10))
    assert rng.position == first.position - 10


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(ParameterError):
        RngState(-1)
    with pytest.raises(ParameterError):
        RngState(2**64)


def test_lifting_matrix_full_rows_when_s_equals_d():
    M = gen_lifting_matrix(RngState(0), m=3, d=4, s=4)
    np.testing.assert_array_equal(M.rows, np.tile(np.arange(4), (3, 1)))


def test_lifting_matrix_single_index_rows():
    M = gen_lifting_matrix(RngState(0), m=5, d=100, s=1)
    assert M.rows.shape == (5, 1)
    assert ((M.rows >= 0) & (M.rows < 100)).all()


def test_lifting_matrix_rows_are_sorted_distinct_subsets():
    M = gen_lifting_matrix(RngState(3), m=200, d=30, s=6)
    assert (np.diff(M.rows, axis=1) > 0).all()
    np.testing.assert_array_equal(np.asarray(M.csr.sum(axis=1)).ravel(), np.full(200, 6.0))


def test_lifting_matrix_is_reproducible_from_seed():
    first = gen_lifting_matrix(RngState(42), m=2, d=6, s=2)
    second = gen_lifting_matrix(RngState(42), m=2, d=6, s=2)
    assert first == second
    assert first != gen_lifting_matrix(RngState(43), m=50, d=6, s=2)


def test_lifting_matrix_does_not_depend_on_chunking(monkeypatch):
    reference = gen_lifting_matrix(RngState(5), m=64, d=20, s=3)
    monkeypatch.setattr(core_hash, "CHUNK_CELLS", 45)
    assert gen_lifting_matrix(RngState(5), m=64, d=20, s=3) == reference


def test_lifting_matrix_rejects_bad_sizes():
    with pytest.raises(ParameterError):
        gen_lifting_matrix(RngState(0), m=4, d=3, s=4)
    with pytest.raises(ParameterError):
        gen_lifting_matrix(RngState(0), m=0, d=3, s=1)


def test_winner_take_all_hand_computed_activations():
    mask = winner_take_all(np.array([3.0, 1.0, 4.0]), 2)
    np.testing.assert_array_equal(np.flatnonzero(mask[0]), [0, 2])


def test_winner_take_all_ties_go_to_smaller_index():
    mask = winner_take_all(np.array([[1.0, 3.0, 3.0, 3.0, 0.0]]), 2)
    np.testing.assert_array_equal(np.flatnonzero(mask[0]), [1, 2])


def test_fly_hash_of_zero_vector_takes_first_rho_indices():
    M = gen_lifting_matrix(RngState(1), m=10, d=5, s=2)
    assert fly_hash(M, 3, np.zeros(5)) == SparseBitVector(10, np.array([0, 1, 2]))


def test_fly_hash_single_column_rows():
    M = LiftingMatrix(m=3, d=2, s=1, rows=np.array([[0], [1], [1]]))
    np.testing.assert_array_equal(fly_hash(M, 1, [3.0, 1.0]).ones, [0])
    np.testing.assert_array_equal(fly_hash(M, 2, [3.0, 1.0]).ones, [0, 1])


def test_fly_hash_has_exactly_rho_ones_on_random_cases():
    rng = RngState(2024)
    for case in range(200):
        d = int(rng.generator.integers(2, 40))
        m = int(rng.generator.integers(1, 300))
        s = int(rng.generator.integers(1, d + 1))
        rho = int(rng.generator.integers(1, m + 1))
        M = gen_lifting_matrix(RngState(case), m, d, s)
        assert (np.diff(M.csr.indptr) == s).all()
        x = rng.generator.standard_normal(d)
        assert fly_hash(M, rho, x).ones.size == rho


def test_fly_hash_is_invariant_to_power_of_two_scaling():
    hasher = make_fly_hasher(HashParams(m=400, s=4, rho=20, seed=3), 16)
    X = RngState(8).generator.standard_normal((50, 16))
    np.testing.assert_array_equal(hasher.hash_batch(X), hasher.hash_batch(8.0 * X))


def test_fly_hash_sparsity_level():
    hasher = make_fly_hasher(HashParams(m=2000, s=5, rho=100, seed=0), 20)
    mask = hasher.hash_batch(RngState(1).generator.standard_normal(20))
    assert mask.sum() == 100
    assert np.isclose(1 - mask.mean(), 0.95)


def test_fly_hash_dimension_mismatch():
    M = gen_lifting_matrix(RngState(0), m=10, d=5, s=2)
    with pytest.raises(DimensionError):
        fly_hash(M, 3, np.zeros(6))


def test_fly_hash_rejects_non_finite_input():
    M = gen_lifting_matrix(RngState(0), m=10, d=3, s=2)
    with pytest.raises(ParameterError):
        fly_hash(M, 3, [0.0, np.nan, 1.0])


def test_hash_batch_matches_single_hashes():
    hasher = make_fly_hasher(HashParams(m=64, s=3, rho=6, seed=12), 9)
    X = RngState(4).generator.standard_normal((7, 9))
    batch = hasher.hash_batch(X)
    for row, x in zip(batch, X):
        assert SparseBitVector.from_mask(row) == hasher.hash(x)
    assert hasher.hash_indices(X).shape == (7, 6)


def test_make_fly_hasher_uses_lifting_stream():
    params = HashParams(m=30, s=2, rho=4, seed=77)
    hasher = make_fly_hasher(params, 10)
    assert hasher.matrix == gen_lifting_matrix(RngState(77, STREAM_LIFTING), 30, 10, 2)
    assert isinstance(hasher, FlyHasher)


def test_hash_params_validation():
    with pytest.raises(ParameterError):
        HashParams(m=10, s=2, rho=11)
    with pytest.raises(DimensionError):
        HashParams(m=10, s=6, rho=2).check_dimension(5)


def test_sim_hash_of_zero_vector_is_all_ones():
    P = gen_gaussian_matrix(RngState(0), 16, 4)
    assert sim_hash(P, np.zeros(4)).ones.size == 16


def test_sim_hash_with_identity_rows_is_sign_pattern():
    x = np.array([1.5, -2.0, 0.25, -0.1])
    np.testing.assert_array_equal(sim_hash(np.eye(4), x).to_dense(), x >= 0)


def test_sim_hash_is_dense():
    P = gen_gaussian_matrix(RngState(3), 10_000, 20)
    fraction = sim_hash(P, RngState(4).generator.standard_normal(20)).ones.size / 10_000
    assert 0.45 <= fraction <= 0.55


def test_hash_indices_are_the_set_bits_of_hash_batch(monkeypatch):
    hasher = make_fly_hasher(HashParams(m=96, s=4, rho=7, seed=30), 12)
    X = RngState(31).generator.standard_normal((40, 12))
    expected = np.nonzero(hasher.hash_batch(X))[1].reshape(40, 7)
    np.testing.assert_array_equal(hasher.hash_indices(X), expected)
    monkeypatch.setattr(core_hash, "CHUNK_CELLS", 200)
    np.testing.assert_array_equal(hasher.hash_indices(X), expected)


def test_fly_hash_overlap_shrinks_with_distance():
    x = RngState(50).generator.standard_normal(20)
    radii = [0.05, 0.5, 2.0, 8.0]
    overlaps = np.zeros(len(radii))
    for seed in range(100):
        hasher = make_fly_hasher(HashParams(m=200, s=3, rho=10, seed=seed), 20)
        direction = RngState(seed, 9).generator.standard_normal(20)
        direction /= np.linalg.norm(direction)
        code = hasher.hash_batch(x)[0]
        nearby = hasher.hash_batch(x + np.outer(radii, direction))
        overlaps += (nearby & code).sum(axis=1)
    overlaps /= 100
    assert (np.diff(overlaps) < 0).all()

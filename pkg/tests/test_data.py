import json

import numpy as np
import pytest

from workflows.flynn.data import (
    Dataset,
    SynthSpec,
    balanced_accuracy,
    binarize,
    fetch_dataset,
    kfold,
    load_csv,
    make_classification,
    minmax_scale,
    normalized_accuracy,
    read_feature_matrix,
    shard,
    train_test_split,
    write_csv,
)
from workflows.flynn.errors import DataError, FetchError, ParameterError

URL = "https://example.org/data/points.csv"


def test_synthetic_data_is_deterministic():
    spec = SynthSpec(n=200, d=10, n_classes=3, seed=4)
    first, second = make_classification(spec), make_classification(spec)
    np.testing.assert_array_equal(first.X, second.X)
    np.testing.assert_array_equal(first.y, second.y)
    assert not np.array_equal(first.X, make_classification(SynthSpec(n=200, d=10, n_classes=3, seed=5)).X)


def test_synthetic_classes_are_balanced():
    dataset = make_classification(SynthSpec(n=301, d=6, n_classes=3, seed=0))
    assert sorted(dataset.class_counts().tolist()) == [100, 100, 101]
    assert dataset.labels == ("0", "1", "2")


def test_synthetic_spec_validation():
    with pytest.raises(ParameterError):
        SynthSpec(n=10, d=5, n_classes=1)
    with pytest.raises(ParameterError):
        SynthSpec(n=10, d=5, n_classes=2, binarize=5)
    with pytest.raises(DataError):
        make_classification(SynthSpec(n=10, d=1, n_classes=2, clusters_per_class=2))


def test_binarize_keeps_b_ones_per_row():
    dataset = make_classification(SynthSpec(n=50, d=8, n_classes=2, seed=1))
    for b in (1, 7):
        X = binarize(dataset, b).X
        assert set(np.unique(X)) <= {0.0, 1.0}
        np.testing.assert_array_equal(X.sum(axis=1), np.full(50, b))


def test_binarize_ties_go_to_smaller_index():
    dataset = Dataset(np.array([[1.0, 1.0, 1.0, 0.0]]), [0], ("0",))
    np.testing.assert_array_equal(binarize(dataset, 2).X, [[1.0, 1.0, 0.0, 0.0]])


def test_minmax_scale():
    dataset = Dataset(np.array([[0.0, 5.0], [2.0, 5.0], [4.0, 5.0]]), [0, 0, 0], ("0",))
    np.testing.assert_array_equal(minmax_scale(dataset).X, [[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]])


def test_csv_round_trip(tmp_path, five_class_dataset):
    path = tmp_path / "points.csv"
    write_csv(five_class_dataset, path)
    loaded = load_csv(path, label_column="label")
    np.testing.assert_array_equal(loaded.X, five_class_dataset.X)
    np.testing.assert_array_equal(loaded.y, five_class_dataset.y)
    assert loaded.labels == five_class_dataset.labels


def test_csv_label_position_and_header_toggle(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("cat, 1.5, 2\ndog, -3, 0.25\ncat, 0, 0\n")
    dataset = load_csv(path, label_column=0, has_header=False)
    assert dataset.labels == ("cat", "dog")
    np.testing.assert_array_equal(dataset.X, [[1.5, 2.0], [-3.0, 0.25], [0.0, 0.0]])
    np.testing.assert_array_equal(dataset.y, [0, 1, 0])


def test_csv_header_row_is_skipped_only_when_declared(tmp_path):
    path = tmp_path / "header.csv"
    path.write_text("a,b,label\n1,2,x\n3,4,y\n")
    assert load_csv(path).n == 2
    with pytest.raises(DataError, match="Non-numeric"):
        load_csv(path, has_header=False)


@pytest.mark.parametrize(
    "content, message",
    [
        ("a,b,label\n1,2,x\n3,4\n", "Ragged"),
        ("a,b,label\n1,2,x\n3,4,y,5\n", "Ragged"),
        ("a,b,label\n1,oops,x\n", "Non-numeric"),
        ("", "empty"),
    ],
)
def test_malformed_csv_is_rejected(tmp_path, content, message):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(DataError, match=message):
        load_csv(path)


def test_missing_csv_and_label_column(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "absent.csv")
    path = tmp_path / "ok.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(DataError, match="not found"):
        load_csv(path, label_column="label")
    with pytest.raises(DataError, match="no header row"):
        load_csv(path, label_column="label", has_header=False)


def test_unlabelled_feature_matrix(tmp_path):
    path = tmp_path / "features.csv"
    path.write_text("x0,x1\n0.1,0.2\n0.3,0.4\n")
    features, dropped = read_feature_matrix(path)
    assert dropped is None
    np.testing.assert_array_equal(features, [[0.1, 0.2], [0.3, 0.4]])


def test_fetch_downloads_once_then_hits_the_cache(cache_dir, fake_network):
    calls, payloads = fake_network
    payloads[URL] = b"x,label\n1,a\n"
    first = fetch_dataset(URL)
    second = fetch_dataset(URL)
    assert first == second
    assert first.read_bytes() == payloads[URL]
    assert first.parent == cache_dir
    assert calls == [URL]
    index = json.loads((cache_dir / "index.json").read_text())
    assert index[URL]["bytes"] == len(payloads[URL])


def test_fetch_replaces_a_corrupted_copy(cache_dir, fake_network):
    calls, payloads = fake_network
    payloads[URL] = b"x,label\n1,a\n"
    path = fetch_dataset(URL)
    path.write_bytes(b"tampered")
    assert fetch_dataset(URL).read_bytes() == payloads[URL]
    assert len(calls) == 2


def test_fetch_rejects_changed_upstream_content(cache_dir, fake_network):
    _, payloads = fake_network
    payloads[URL] = b"x,label\n1,a\n"
    path = fetch_dataset(URL)
    path.unlink()
    payloads[URL] = b"x,label\n2,b\n"
    with pytest.raises(FetchError, match="hash mismatch"):
        fetch_dataset(URL)


def test_fetch_retries_then_fails(cache_dir, fake_network):
    calls, _ = fake_network
    with pytest.raises(FetchError):
        fetch_dataset(URL, retries=3)
    assert calls == [URL] * 3


def test_kfold_partitions_the_rows(separated_dataset):
    splits = kfold(separated_dataset, 10, seed=3)
    assert len(splits) == 10
    test_sizes = [test.n for _, test in splits]
    assert sum(test_sizes) == separated_dataset.n
    assert all(train.n + test.n == separated_dataset.n for train, test in splits)


def test_kfold_leave_one_out(tiny_dataset):
    splits = kfold(tiny_dataset, tiny_dataset.n, seed=0)
    assert [test.n for _, test in splits] == [1, 1, 1, 1]
    held_out = np.concatenate([test.X for _, test in splits])
    assert sorted(map(tuple, held_out)) == sorted(map(tuple, tiny_dataset.X))
    with pytest.raises(ParameterError):
        kfold(tiny_dataset, 5, seed=0)


def test_train_test_split(separated_dataset):
    train, test = train_test_split(separated_dataset, 0.25, seed=1)
    assert (train.n, test.n) == (90, 30)
    again, _ = train_test_split(separated_dataset, 0.25, seed=1)
    np.testing.assert_array_equal(train.X, again.X)
    train, test = train_test_split(separated_dataset, 20, seed=1)
    assert test.n == 20
    with pytest.raises(ParameterError):
        train_test_split(separated_dataset, 1.0, seed=1)


def test_round_robin_shards(five_class_dataset):
    shards = shard(five_class_dataset, 4)
    assert [s.n for s in shards] == [75, 75, 75, 75]
    np.testing.assert_array_equal(shards[1].X[0], five_class_dataset.X[1])
    assert all(s.labels == five_class_dataset.labels for s in shards)


def test_by_class_shards_can_be_empty(five_class_dataset):
    shards = shard(five_class_dataset, 8, "by-class")
    assert [s.n for s in shards[5:]] == [0, 0, 0]
    for rank, s in enumerate(shards[:5]):
        assert set(s.y.tolist()) == {rank}
    with pytest.raises(ParameterError):
        shard(five_class_dataset, 2, "alphabetical")


def test_normalized_accuracy():
    assert normalized_accuracy(0.8, 0.8) == 0.0
    assert normalized_accuracy(1.05 * 0.8, 0.8) == pytest.approx(-0.05)
    with pytest.raises(ParameterError):
        normalized_accuracy(0.5, 0.0)


def test_balanced_accuracy():
    assert balanced_accuracy([0, 0, 0, 1], [0, 0, 0, 0]) == 0.5
    assert balanced_accuracy([2, 2, 1], [2, 2, 1]) == 1.0
    with pytest.raises(DataError):
        balanced_accuracy([], [])


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), [0, 3], ("a", "b"))
    with pytest.raises(DataError):
        Dataset(np.array([[np.inf]]), [0], ("a",))
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 1)), [0], ("b", "a"))

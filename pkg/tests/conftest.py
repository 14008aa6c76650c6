import numpy as np
import pytest
import requests

from workflows.flynn.data import Dataset, SynthSpec, make_classification


@pytest.fixture
def separated_dataset() -> Dataset:
    """Two well-separated classes in 8 dimensions."""
    return make_classification(SynthSpec(n=120, d=8, n_classes=2, clusters_per_class=1, class_sep=6.0, seed=11))


@pytest.fixture
def five_class_dataset() -> Dataset:
    return make_classification(SynthSpec(n=300, d=12, n_classes=5, clusters_per_class=2, class_sep=3.0, seed=5))


@pytest.fixture
def tiny_dataset() -> Dataset:
    X = np.array([[0.0, 0.0], [0.1, 0.2], [5.0, 5.0], [5.2, 4.9]])
    return Dataset.from_raw_labels(X, ["a", "a", "b", "b"])


@pytest.fixture
def cache_dir(tmp_path, monkeypatch):
    path = tmp_path / "cache"
    monkeypatch.setenv("FLYNN_CACHE_DIR", str(path))
    return path


class FakeResponse:
    def __init__(self, content: bytes, status: int = 200):
        self.content = content
        self.status_code = status

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"status {self.status_code}")


@pytest.fixture
def fake_network(monkeypatch):
    """Replace requests.get; returns the list of requested URLs and the payload map."""
    calls = []
    payloads = {}

    def fake_get(url, timeout=None):
        calls.append(url)
        if url not in payloads:
            raise requests.ConnectionError(f"unreachable: {url}")
        return FakeResponse(payloads[url])

    monkeypatch.setattr(requests, "get", fake_get)
    monkeypatch.setattr("workflows.flynn.data.time.sleep", lambda seconds: None)
    return calls, payloads


@pytest.fixture
def block_dataset() -> Dataset:
    """Two classes living on disjoint coordinate blocks, so their FlyHash filters never overlap."""
    rng = np.random.default_rng(17)
    y = np.arange(60) % 2
    X = 0.3 * rng.standard_normal((60, 8))
    X[y == 0, :4] += 5.0
    X[y == 1, 4:] += 5.0
    return Dataset(X, y, ("0", "1"))

import gzip
import struct

import numpy as np
import pytest
import requests

from terminator.data import (
    IMAGES_MAGIC,
    LABELS_MAGIC,
    DataFormatError,
    Dataset,
    NormStats,
    batches,
    download_mnist,
    inverse_permutation,
    load_idx,
    load_mnist,
    read_idx,
    subset,
    synthetic,
    to_sequential,
)


def _write_idx(path, magic, array, compress=False):
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.astype(np.uint8).tobytes()
    if compress:
        with gzip.open(path, "wb") as f:
            f.write(payload)
    else:
        path.write_bytes(payload)
    return path


def _fake_mnist(root, n_train=6, n_test=4, compress=True):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    suffix = ".gz" if compress else ""
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        _write_idx(root / f"{prefix}-images-idx3-ubyte{suffix}", IMAGES_MAGIC, rng.integers(0, 256, size=(n, 28, 28)), compress)
        _write_idx(root / f"{prefix}-labels-idx1-ubyte{suffix}", LABELS_MAGIC, np.arange(n) % 10, compress)
    return root


def test_read_idx_plain_and_gzip(tmp_path):
    arr = np.arange(24).reshape(2, 3, 4)
    plain = _write_idx(tmp_path / "a-idx3-ubyte", IMAGES_MAGIC, arr)
    packed = _write_idx(tmp_path / "b-idx3-ubyte.gz", IMAGES_MAGIC, arr, compress=True)
    assert np.array_equal(read_idx(plain, IMAGES_MAGIC), arr)
    assert np.array_equal(read_idx(packed), arr)


def test_read_idx_rejects_bad_magic_and_truncation(tmp_path):
    path = _write_idx(tmp_path / "x", LABELS_MAGIC, np.arange(5))
    with pytest.raises(DataFormatError, match="magic"):
        read_idx(path, IMAGES_MAGIC)
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(DataFormatError, match="truncated"):
        read_idx(path)
    with pytest.raises(DataFormatError):
        read_idx(tmp_path / "missing")


def test_load_idx_standardizes_with_own_or_given_stats(tmp_path):
    root = _fake_mnist(tmp_path, compress=False)
    train = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    assert train.images.shape == (6, 1, 28, 28)
    assert np.isclose(train.images.mean(), 0.0)
    assert np.isclose(train.images.std(), 1.0)
    stats = NormStats(mean=0.5, std=0.25)
    test = load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte", "test", stats, limit=3)
    assert len(test) == 3
    assert test.meta == {"mean": 0.5, "std": 0.25}


def test_load_mnist_test_split_uses_train_statistics(tmp_path):
    root = _fake_mnist(tmp_path)
    train = load_mnist(root, "train")
    test = load_mnist(root, "test")
    assert test.norm_stats == train.norm_stats


def test_load_mnist_reads_env_root(tmp_path, monkeypatch):
    _fake_mnist(tmp_path / "mnist")
    monkeypatch.setenv("TERMINATOR_DATA_DIR", str(tmp_path))
    assert len(load_mnist(split="train", limit=2)) == 2


def test_load_mnist_missing_files(tmp_path):
    with pytest.raises(DataFormatError, match="download"):
        load_mnist(tmp_path, "train")
    with pytest.raises(ValueError):
        load_mnist(tmp_path, "valid")


class _FakeResponse:
    def __init__(self, content, status=200):
        self.content = content
        self.status_code = status

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"status {self.status_code}")


class _FakeSession:
    def __init__(self, status=200):
        self.status = status
        self.urls = []

    def get(self, url, timeout=None):
        self.urls.append(url)
        return _FakeResponse(b"payload", self.status)


def test_download_fetches_missing_files_only(tmp_path):
    (tmp_path / "train-images-idx3-ubyte.gz").write_bytes(b"already here")
    session = _FakeSession()
    target = download_mnist(tmp_path, session=session, base_url="https://example.test/")
    assert target == tmp_path
    assert len(session.urls) == 3
    assert all(url.startswith("https://example.test/") and url.endswith(".gz") for url in session.urls)
    assert (tmp_path / "t10k-labels-idx1-ubyte.gz").read_bytes() == b"payload"


def test_download_failure_is_a_data_error(tmp_path):
    with pytest.raises(DataFormatError):
        download_mnist(tmp_path, session=_FakeSession(status=503))


def test_to_sequential_row_major_and_permutation():
    ds = synthetic("stripes", 4, seed=0, size=4)
    seq = to_sequential(ds)
    assert seq.images.shape == (4, 1, 16)
    assert np.array_equal(seq.images[0, 0, :4], ds.images[0, 0, 0])
    perm_a = to_sequential(ds, permutation_seed=42)
    perm_b = to_sequential(ds, permutation_seed=42)
    assert perm_a.meta["permutation"] == perm_b.meta["permutation"]
    assert perm_a.meta["permutation_seed"] == 42
    restored = perm_a.images[..., inverse_permutation(perm_a.meta["permutation"])]
    assert np.array_equal(restored, seq.images)


def test_to_sequential_needs_images():
    with pytest.raises(DataFormatError):
        to_sequential(to_sequential(synthetic("stripes", 2, size=4)))


def test_synthetic_is_seeded_balanced_and_standardized():
    a = synthetic("blobs", 8, seed=3)
    b = synthetic("blobs", 8, seed=3)
    assert np.array_equal(a.images, b.images)
    assert a.num_classes == 4
    assert np.bincount(a.labels).tolist() == [2, 2, 2, 2]
    assert np.isclose(a.images.mean(), 0.0)
    with pytest.raises(ValueError):
        synthetic("noise", 8)
    with pytest.raises(ValueError):
        synthetic("stripes", 1)


def test_stripes_orientation_matches_label():
    ds = synthetic("stripes", 2, seed=0, size=8)
    horizontal, vertical = ds.images[0, 0], ds.images[1, 0]
    assert horizontal.std(axis=1).mean() < horizontal.std(axis=0).mean()
    assert vertical.std(axis=0).mean() < vertical.std(axis=1).mean()


def test_dataset_validates_labels():
    with pytest.raises(DataFormatError):
        Dataset(images=np.zeros((2, 1, 2, 2)), labels=np.array([0]))
    with pytest.raises(DataFormatError):
        Dataset(images=np.zeros((1, 1, 2, 2)), labels=np.array([3]), num_classes=2)


def test_batches_cover_every_sample_once():
    ds = synthetic("stripes", 10, seed=0, size=4)
    seen = np.concatenate([y for _, y in batches(ds, 4, shuffle_seed=1)])
    sizes = [len(y) for _, y in batches(ds, 4)]
    assert sorted(seen.tolist()) == sorted(ds.labels.tolist())
    assert sizes == [4, 4, 2]
    assert [len(y) for _, y in batches(subset(ds, 3), 4)] == [3]
    with pytest.raises(ValueError):
        next(batches(ds, 0))


def test_stripes_are_separable_by_a_two_feature_linear_rule():
    ds = synthetic("stripes", 200, seed=4, size=8)
    images = ds.images[:, 0]
    features = np.stack([images.var(axis=2).mean(axis=1), images.var(axis=1).mean(axis=1)], axis=1)
    # row variance minus column variance: negative for horizontal stripes
    scores = features @ np.array([1.0, -1.0])
    predictions = (scores > 0).astype(np.int64)
    assert np.array_equal(predictions, ds.labels)

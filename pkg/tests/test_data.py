import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dbfat.data import (
    BadMagicError, CountMismatchError, Dataset, PartitionSpec, TruncatedFileError,
    label_histogram, load_csv, load_mnist_idx, make_synthetic_blobs, partition,
    partition_dirichlet, partition_iid, partition_shards, read_manifest, save_csv,
    write_idx_images, write_idx_labels, write_manifest,
)

MNIST = Path(__file__).resolve().parents[1] / "data" / "mnist5k"


def balanced(n, c, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, d)), np.arange(n) % c, c)


def assert_disjoint_cover(shards, n, expect_all=True):
    seen = np.concatenate([s.index_array() for s in shards]) if shards else np.array([])
    assert len(seen) == len(np.unique(seen)), "shards overlap or repeat indices"
    for s in shards:
        assert len(set(s.indices)) == s.n_k
    if expect_all:
        assert sorted(seen.tolist()) == list(range(n))
    return seen


# -- IDX ----------------------------------------------------------------------


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (7, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 7, dtype=np.uint8)
    write_idx_images(tmp_path / "i.gz", imgs)
    write_idx_labels(tmp_path / "l", labels)
    ds = load_mnist_idx(tmp_path / "i.gz", tmp_path / "l")
    assert ds.features.shape == (7, 784)
    np.testing.assert_array_equal(ds.features, imgs.reshape(7, -1) / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.features.min() >= 0 and ds.features.max() <= 1


def test_idx_header_is_big_endian(tmp_path):
    write_idx_labels(tmp_path / "l", np.array([1, 2, 3]))
    raw = (tmp_path / "l").read_bytes()
    assert raw[:8] == bytes([0, 0, 8, 1, 0, 0, 0, 3])


def test_empty_file_is_truncated_header(tmp_path):
    (tmp_path / "empty").write_bytes(b"")
    write_idx_labels(tmp_path / "l", np.array([1]))
    with pytest.raises(TruncatedFileError, match="truncated header"):
        load_mnist_idx(tmp_path / "empty", tmp_path / "l")


def test_truncated_pixels(tmp_path):
    raw = struct.pack(">4i", 2051, 2, 28, 28) + bytes(100)
    (tmp_path / "i").write_bytes(raw)
    write_idx_labels(tmp_path / "l", np.array([1, 2]))
    with pytest.raises(TruncatedFileError, match="truncated data"):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")


def test_bad_magic(tmp_path):
    write_idx_images(tmp_path / "i", np.zeros((2, 28, 28)))
    write_idx_labels(tmp_path / "l", np.array([1, 2]))
    with pytest.raises(BadMagicError):
        load_mnist_idx(tmp_path / "l", tmp_path / "i")


def test_count_mismatch(tmp_path):
    write_idx_images(tmp_path / "i", np.zeros((3, 28, 28)))
    write_idx_labels(tmp_path / "l", np.array([1, 2]))
    with pytest.raises(CountMismatchError, match="count mismatch"):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")


@pytest.mark.skipif(not MNIST.exists(), reason="bundled MNIST subset missing")
def test_bundled_mnist_subset():
    train = load_mnist_idx(MNIST / "train-images-idx3-ubyte.gz", MNIST / "train-labels-idx1-ubyte.gz")
    test = load_mnist_idx(MNIST / "t10k-images-idx3-ubyte.gz", MNIST / "t10k-labels-idx1-ubyte.gz")
    assert (len(train), train.dim, train.num_classes) == (4000, 784, 10)
    assert len(test) == 1000
    np.testing.assert_array_equal(np.bincount(test.labels), 100)


def test_bundled_files_are_gzipped_idx():
    path = MNIST / "train-labels-idx1-ubyte.gz"
    if not path.exists():
        pytest.skip("bundled MNIST subset missing")
    assert struct.unpack(">i", gzip.decompress(path.read_bytes())[:4])[0] == 2049


# -- synthetic blobs -------------------------------------------------------------


def test_blobs_balanced_and_deterministic():
    a = make_synthetic_blobs(100, 2, 0.05, 3)
    assert np.bincount(a.labels).tolist() == [50, 50]
    b = make_synthetic_blobs(100, 2, 0.05, 3)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = make_synthetic_blobs(101, 3, 0.05, 3)
    counts = np.bincount(c.labels)
    assert counts.max() - counts.min() <= 1


def test_blobs_zero_spread_collapse_to_centers():
    ds = make_synthetic_blobs(60, 3, 0.0, 0)
    for c in range(3):
        pts = ds.features[ds.labels == c]
        assert (pts == pts[0]).all()
    assert 0 <= ds.features.min() and ds.features.max() <= 1


def test_blobs_csv_round_trip(tmp_path):
    ds = make_synthetic_blobs(20, 2, 0.1, 1)
    save_csv(ds, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "x0,x1,label"
    assert load_csv(tmp_path / "b.csv", 2).equals(ds)


def test_blobs_require_n_at_least_c():
    with pytest.raises(ValueError):
        make_synthetic_blobs(2, 3, 0.1, 0)


# -- IID ------------------------------------------------------------------------


def test_iid_equal_sizes():
    shards = partition_iid(balanced(100, 10), 10, 0)
    assert [s.n_k for s in shards] == [10] * 10
    assert_disjoint_cover(shards, 100)
    uneven = partition_iid(balanced(103, 10), 10, 0)
    sizes = [s.n_k for s in uneven]
    assert max(sizes) - min(sizes) <= 1
    assert_disjoint_cover(uneven, 103)


def test_iid_single_client_is_everything():
    (shard,) = partition_iid(balanced(37, 3), 1, 5)
    assert shard.indices == tuple(range(37))


def test_iid_too_many_clients():
    with pytest.raises(ValueError):
        partition_iid(balanced(5, 2), 6, 0)


def test_iid_label_mix_matches_global():
    ds = balanced(10000, 10)
    hist = label_histogram(ds, partition_iid(ds, 10, 0))
    chi2, p, _, _ = stats.chi2_contingency(hist)
    assert p > 0.01


# -- Dirichlet ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_dirichlet_conserves_samples(seed):
    ds = balanced(500, 10)
    shards = partition_dirichlet(ds, 7, 0.5, seed)
    assert sum(s.n_k for s in shards) == 500
    assert_disjoint_cover(shards, 500)


def test_dirichlet_large_alpha_splits_evenly():
    ds = balanced(1000, 10)
    hist = label_histogram(ds, partition_dirichlet(ds, 2, 1e6, 0))
    np.testing.assert_allclose(hist / 100.0, 0.5, atol=0.02)


@pytest.mark.skipif(not MNIST.exists(), reason="bundled MNIST subset missing")
def test_dirichlet_half_skews_mnist_clients():
    ds = load_mnist_idx(MNIST / "train-images-idx3-ubyte.gz", MNIST / "train-labels-idx1-ubyte.gz")
    hist = label_histogram(ds, partition_dirichlet(ds, 10, 0.5, 0))
    share = hist.max(axis=1) / np.maximum(hist.sum(axis=1), 1)
    assert np.sum(share > 0.3) >= 5


def test_dirichlet_allows_empty_clients():
    ds = balanced(20, 2)
    shards = partition_dirichlet(ds, 30, 0.05, 0)
    assert len(shards) == 30
    assert any(s.n_k == 0 for s in shards)
    assert_disjoint_cover(shards, 20)


# -- shards ---------------------------------------------------------------------


def test_shards_two_clients_five_labels_each():
    ds = balanced(1000, 10)
    hist = label_histogram(ds, partition_shards(ds, 2, 5, 0))
    assert ((hist > 0).sum(axis=1) == 5).all()


def test_shards_one_client_all_labels():
    ds = balanced(100, 10)
    (shard,) = partition_shards(ds, 1, 10, 0)
    assert shard.n_k == 100
    assert len(set(ds.labels[shard.index_array()])) == 10


@pytest.mark.parametrize("seed", range(100))
def test_shards_label_bound(seed):
    rng = np.random.default_rng(seed)
    k, q = int(rng.integers(1, 12)), int(rng.integers(1, 5))
    ds = Dataset(rng.random((300, 2)), rng.integers(0, 10, 300), 10)
    shards = partition_shards(ds, k, q, seed)
    size = shards[0].n_k // q
    assert 1 <= size <= 300 // (k * q)
    assert all(s.n_k == q * size for s in shards)
    assert all(len(set(ds.labels[s.index_array()])) <= q for s in shards)
    assert_disjoint_cover(shards, 300, expect_all=False)


def test_shards_balanced_size_is_floor():
    ds = balanced(1003, 10)
    shards = partition_shards(ds, 10, 2, 0)
    assert all(s.n_k == 2 * 50 for s in shards)


def test_shards_need_enough_samples():
    with pytest.raises(ValueError):
        partition_shards(balanced(10, 2), 4, 3, 0)


# -- shared properties ----------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(
    st.sampled_from(["iid", "dirichlet", "shards"]),
    st.integers(1, 8),
    st.integers(0, 2**31 - 1),
)
def test_partitions_are_deterministic_disjoint(kind, k, seed):
    ds = balanced(120, 4)
    spec = PartitionSpec(kind, k, 0.5, 2, seed)
    a = partition(ds, spec)
    assert a == partition(ds, spec)
    assert len(a) == k
    assert_disjoint_cover(a, 120, expect_all=kind != "shards")


def test_manifest_round_trip(tmp_path):
    shards = partition_iid(balanced(100, 10), 10, 0)
    write_manifest(shards, tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == 10
    assert read_manifest(tmp_path / "m.jsonl") == shards


def test_partition_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec("dirichlet", 3, alpha=0.0)
    with pytest.raises(ValueError):
        PartitionSpec("bogus", 3)
    with pytest.raises(ValueError):
        PartitionSpec("iid", 0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)), [], 2)

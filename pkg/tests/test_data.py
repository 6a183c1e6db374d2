"""Dataset loading, baselines, feature mapping, and subset tests."""

import struct

import numpy as np
import pytest

from packetlab import data, nn, synthdata


@pytest.fixture(scope="module")
def digits_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("digits")
    synthdata.make_digits_dataset(out, n_train=200, n_test=60, seed=0)
    return out


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(7, 28, 28)).astype(np.uint8)
    labels = rng.integers(0, 10, size=7).astype(np.uint8)
    synthdata.write_idx_images(tmp_path / "imgs", images)
    synthdata.write_idx_labels(tmp_path / "lbls", labels)
    assert np.array_equal(data.load_idx_images(tmp_path / "imgs"), images)
    assert np.array_equal(data.load_idx_labels(tmp_path / "lbls"), labels)


def test_idx_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(struct.pack(">IIII", 0x00000999, 1, 28, 28) + b"\x00" * 784)
    with pytest.raises(data.DataFormatError):
        data.load_idx_images(path)
    with pytest.raises(data.DataFormatError):
        data.load_idx_labels(path)


def test_idx_truncated_rejected(tmp_path):
    path = tmp_path / "short"
    path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 28, 28) + b"\x00" * 100)
    with pytest.raises(data.DataFormatError):
        data.load_idx_images(path)


def test_load_mnist_scales_to_unit_interval(digits_dir):
    ds = data.load_mnist(digits_dir, "train")
    assert ds.images.shape[1:] == (1, 28, 28)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.kind == "pixel"
    assert len(ds) == 200


def test_cifar_round_trip(tmp_path):
    synthdata.make_cifar_batches(tmp_path, n=30, seed=1, per_file=16)
    ds = data.load_cifar10(tmp_path)
    assert ds.images.shape == (30, 3, 32, 32)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert set(np.unique(ds.labels)) <= set(range(10))


def test_cifar_bad_record_length_rejected(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(b"\x00" * 3000)
    with pytest.raises(data.DataFormatError):
        data.load_cifar10(path)


def test_cifar_missing_files_rejected(tmp_path):
    with pytest.raises(data.DataFormatError):
        data.load_cifar10(tmp_path)


def test_dataset_validation():
    with pytest.raises(data.DataFormatError):
        data.Dataset(np.zeros((3, 4)), np.zeros(2, dtype=int))
    with pytest.raises(data.DataFormatError):
        data.Dataset(np.full((2, 4), 1.5), np.zeros(2, dtype=int))


def test_compute_baseline_is_the_mean():
    images = np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))])
    ds = data.Dataset(images, np.array([0, 1]))
    base = data.compute_baseline(ds)
    assert np.allclose(base.x_base, 0.5)
    scalar = data.compute_baseline(ds, scalar_mean=True)
    assert np.allclose(scalar.x_base, 0.5)
    empty = data.Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        data.compute_baseline(empty)


def test_to_features_records_padded_domain(digits_dir):
    ds = data.subset(data.load_mnist(digits_dir, "train"), 100, seed=0)
    model = nn.build_model("cnn3-mnist", seed=0)
    ext, head = nn.split(model)
    feats = data.to_features(ds, ext)
    assert feats.kind == "feature"
    # extractor ends in max-pool over relu outputs: all features >= 0
    assert feats.images.min() >= 0.0
    # feature width matches the head input width
    assert feats.dim == 288
    span = np.asarray(feats.hi) - np.asarray(feats.lo)
    assert np.all(span > 0)
    observed_lo = feats.images.min(axis=0)
    observed_hi = feats.images.max(axis=0)
    assert np.all(np.asarray(feats.lo) <= observed_lo)
    assert np.all(np.asarray(feats.hi) >= observed_hi)


def test_subset_is_stratified_and_deterministic(digits_dir):
    ds = data.load_mnist(digits_dir, "train")
    a = data.subset(ds, 100, seed=3)
    b = data.subset(ds, 100, seed=3)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    # class proportions within one sample of the largest-remainder quota
    for c in np.unique(ds.labels):
        want = 100 * (ds.labels == c).sum() / len(ds)
        got = (a.labels == c).sum()
        assert abs(got - want) <= 1


def test_subset_rejects_oversized_request(digits_dir):
    ds = data.load_mnist(digits_dir, "train")
    with pytest.raises(ValueError):
        data.subset(ds, len(ds) + 1, seed=0)


def test_dataset_container_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    ds = data.Dataset(rng.random((5, 6)), rng.integers(0, 3, 5),
                      kind="feature", lo=np.full(6, -0.5), hi=np.full(6, 2.0))
    path = tmp_path / "ds.upkd"
    data.save_dataset(ds, path)
    loaded = data.load_dataset(path)
    assert loaded.kind == "feature"
    assert np.array_equal(loaded.images, ds.images)
    assert np.array_equal(loaded.labels, ds.labels)
    assert np.array_equal(loaded.lo, ds.lo)
    assert np.array_equal(loaded.hi, ds.hi)


def test_domain_for_scalar_and_array():
    ds = data.Dataset(np.zeros((1, 4)), np.zeros(1, dtype=int))
    assert ds.domain_for(2) == (0.0, 1.0)
    ds2 = data.Dataset(np.zeros((1, 4)), np.zeros(1, dtype=int),
                       kind="feature", lo=np.arange(4.0), hi=np.arange(4.0) + 1)
    assert ds2.domain_for(2) == (2.0, 3.0)

import numpy as np
import pytest

from fedoui import nn
from fedoui.data import (CIFAR_MEAN, TEST_FILE, TRAIN_FILES, Dataset, label_histogram, load_cifar10,
                         read_cifar10_batch, resolve_data_dir, standardize, subset, synthetic_blobs,
                         to_pixels, unstandardize, write_cifar10_batch)
from fedoui.exceptions import DataError, InputError


def test_single_record(tmp_path):
    path = tmp_path / "one.bin"
    path.write_bytes(bytes([3]) + bytes([255]) * 3072)
    pixels, labels = read_cifar10_batch(path)
    assert labels.tolist() == [3]
    ds = Dataset(labels, pixels=pixels)
    assert np.allclose(unstandardize(ds.images), 1.0, atol=1e-12)


def test_truncated(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(bytes(3072))
    with pytest.raises(DataError, match="offset 0"):
        read_cifar10_batch(path)


def test_bad_label(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes([1]) + bytes(3072) + bytes([12]) + bytes(3072))
    with pytest.raises(DataError, match="offset 3073"):
        read_cifar10_batch(path)


def test_round_trip_bytes(tmp_path, rng):
    raw = rng.integers(0, 256, size=(5, 3073), dtype=np.uint8)
    raw[:, 0] = rng.integers(0, 10, size=5)
    src = tmp_path / "src.bin"
    src.write_bytes(raw.tobytes())
    pixels, labels = read_cifar10_batch(src)
    images = Dataset(labels, pixels=pixels).images
    write_cifar10_batch(tmp_path / "dst.bin", to_pixels(images), labels)
    assert (tmp_path / "dst.bin").read_bytes() == src.read_bytes()


def test_standardize_inverse(rng):
    px = rng.integers(0, 256, size=(2, 3, 4, 4), dtype=np.uint8)
    assert np.allclose(unstandardize(standardize(px)), px / 255.0, atol=1e-15)
    assert standardize(np.zeros((1, 3, 1, 1), dtype=np.uint8))[0, :, 0, 0] == pytest.approx(
        -CIFAR_MEAN / np.array([0.2470, 0.2435, 0.2616]))


def _fake_archive(root, per_file=4):
    rng = np.random.default_rng(1)
    for name in TRAIN_FILES + (TEST_FILE,):
        px = rng.integers(0, 256, size=(per_file, 3, 32, 32), dtype=np.uint8)
        write_cifar10_batch(root / name, px, np.arange(per_file) % 10)


def test_load_fake_archive(tmp_path):
    _fake_archive(tmp_path)
    train, test = load_cifar10(tmp_path)
    assert len(train) == 20 and len(test) == 4
    assert train.images.shape == (20, 3, 32, 32)


def test_nested_directory_and_env(tmp_path, monkeypatch):
    nested = tmp_path / "cifar-10-batches-bin"
    nested.mkdir()
    _fake_archive(nested)
    monkeypatch.setenv("FEDOUI_DATA_DIR", str(tmp_path))
    assert resolve_data_dir() == nested
    assert len(load_cifar10()[0]) == 20


def test_missing_file_names_path(tmp_path):
    with pytest.raises(DataError, match="data_batch_1.bin"):
        load_cifar10(tmp_path)


@pytest.mark.skipif(not (resolve_data_dir() / TEST_FILE).exists(), reason="CIFAR-10 archive not present")
def test_real_archive_composition():
    train, test = load_cifar10()
    assert len(train) == 50_000 and len(test) == 10_000
    assert label_histogram(train.labels).tolist() == [5000] * 10
    assert label_histogram(test.labels).tolist() == [1000] * 10


class TestSubset:
    def _ds(self, n=10):
        return Dataset(np.arange(n) % 3, images=np.arange(n, dtype=float).reshape(n, 1, 1, 1), n_classes=3)

    def test_full_is_permutation(self):
        out = subset(self._ds(), 10, np.random.default_rng(0))
        assert sorted(out.images.ravel().tolist()) == list(range(10))

    def test_empty(self):
        assert len(subset(self._ds(), 0, np.random.default_rng(0))) == 0

    def test_deterministic(self):
        a = subset(self._ds(), 6, np.random.default_rng(5)).images.ravel()
        b = subset(self._ds(), 6, np.random.default_rng(5)).images.ravel()
        assert np.array_equal(a, b)

    def test_too_many(self):
        with pytest.raises(InputError):
            subset(self._ds(), 11, np.random.default_rng(0))


class TestSynthetic:
    def test_zero_spread(self, rng):
        ds = synthetic_blobs(3, 4, 5, 2, 0.0, rng)
        for c in range(3):
            imgs = ds.images[ds.labels == c]
            assert np.all(imgs == imgs[0])

    def test_histogram(self, rng):
        ds = synthetic_blobs(4, 7, 4, 1, 0.5, rng)
        assert label_histogram(ds.labels, 4).tolist() == [7] * 4

    def test_linear_probe_separates(self):
        rng = np.random.default_rng(3)
        ds = synthetic_blobs(2, 100, 4, 3, 0.05, rng)
        spec = nn.ModelSpec((3, 4, 4), (nn.Flatten("flat"), nn.Linear("fc", 48, 2)), 2, tap="fc")
        params = nn.init_params(spec, rng)
        velocity = params.zeros_like()
        for _ in range(100):
            _, cache = nn.forward(spec, params, ds.images)
            grads = nn.backward(spec, params, cache, ds.labels)
            params, velocity = nn.sgd_momentum_step(params, grads, velocity, 0.05, 0.9)
        acc = np.mean(nn.predict_logits(spec, params, ds.images).argmax(1) == ds.labels)
        assert acc > 0.95

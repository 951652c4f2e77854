import numpy as np
import pytest

from condnets.dataset import (
    CIFAR_RECORD_BYTES,
    DATA_DIR_ENV,
    Dataset,
    default_data_dir,
    gen_synthetic,
    load_cifar10,
)
from condnets.errors import ArgumentError, DataError, FormatError


def cifar_records(labels, fill=None):
    records = np.zeros((len(labels), CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    for i in range(len(labels)):
        records[i, 1:] = (np.arange(CIFAR_RECORD_BYTES - 1) + i) % 256 if fill is None else fill
    return records.tobytes()


class TestCifar:
    def test_single_record(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(cifar_records([9, 3]))
        data = load_cifar10(path, limit=1)
        assert len(data) == 1
        assert data.labels.tolist() == [9]
        assert data.images.shape == (1, 3, 32, 32)
        assert data.images.dtype == np.float32
        assert data.images[0, 0, 0, 1] == pytest.approx(1 / 255)
        assert data.images[0, 1, 0, 0] == pytest.approx((1024 % 256) / 255)
        assert data.provenance == "cifar10:data_batch_1.bin"

    def test_directory_in_name_order(self, tmp_path):
        (tmp_path / "data_batch_2.bin").write_bytes(cifar_records([2, 2]))
        (tmp_path / "data_batch_1.bin").write_bytes(cifar_records([1, 1]))
        (tmp_path / "readme.html").write_text("not a batch")
        data = load_cifar10(tmp_path, limit=3)
        assert data.labels.tolist() == [1, 1, 2]

    def test_white_pixels(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(cifar_records([0], fill=255))
        assert np.all(load_cifar10(path).images == 1.0)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(cifar_records([1, 2])[:-5])
        with pytest.raises(FormatError) as info:
            load_cifar10(path)
        assert info.value.offset == CIFAR_RECORD_BYTES

    def test_bad_label(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(cifar_records([1, 10]))
        with pytest.raises(FormatError) as info:
            load_cifar10(path)
        assert info.value.offset == CIFAR_RECORD_BYTES

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_cifar10(tmp_path / "nope.bin")
        with pytest.raises(DataError):
            load_cifar10(tmp_path)

    def test_limit_must_be_positive(self, tmp_path):
        with pytest.raises(ArgumentError):
            load_cifar10(tmp_path, limit=0)


class TestSynthetic:
    @pytest.mark.parametrize("kind", ["two_clusters", "block_classes", "routed_clusters"])
    def test_deterministic(self, kind):
        a, b = gen_synthetic(kind, 40, seed=4), gen_synthetic(kind, 40, seed=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, gen_synthetic(kind, 40, seed=5).images)

    def test_two_clusters_are_separable(self):
        data = gen_synthetic("two_clusters", 100)
        assert np.array_equal(data.images[:, 0] > 0, data.labels == 1)
        assert np.bincount(data.labels).tolist() == [50, 50]

    def test_routed_clusters(self):
        data = gen_synthetic("routed_clusters", 100)
        x = data.images
        assert np.array_equal(data.labels == 1, x[:, 0] * x[:, 1] < 0)
        assert np.min(np.abs(x)) >= 0.1

    def test_block_classes(self):
        data = gen_synthetic("block_classes", 16, groups=2, classes=4, channels=4, size=8)
        assert data.images.shape == (16, 4, 8, 8)
        assert data.images.min() >= 0 and data.images.max() <= 1
        for image, label in zip(data.images, data.labels):
            energy = image.reshape(2, 2, 8, 8).mean(axis=(1, 2, 3))
            assert np.argmax(energy) == label % 2

    def test_block_classes_channel_split(self):
        with pytest.raises(ArgumentError):
            gen_synthetic("block_classes", 10, groups=3, channels=4)

    def test_unknown_kind(self):
        with pytest.raises(ArgumentError):
            gen_synthetic("spirals", 10)

    def test_too_small(self):
        with pytest.raises(ArgumentError):
            gen_synthetic("two_clusters", 1)


class TestDataset:
    def test_label_range(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 3)), np.array([0, 2]), num_classes=2)

    def test_pixel_range(self):
        with pytest.raises(DataError):
            Dataset(np.full((1, 1, 2, 2), 2.0), np.array([0]), num_classes=1)

    def test_subset(self):
        data = gen_synthetic("two_clusters", 10)
        part = data.subset([3, 1])
        assert np.array_equal(part.images, data.images[[3, 1]])
        assert part.num_classes == 2


def test_default_data_dir(monkeypatch, tmp_path):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    assert default_data_dir() is None
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path))
    assert default_data_dir() == tmp_path

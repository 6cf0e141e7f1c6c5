import gzip
import struct

import numpy as np
import pytest

from src.datasets import (
    Dataset,
    load_cifar10,
    load_mnist,
    read_image,
    read_loss_curve,
    synth_dataset,
    write_image,
    write_loss_curve,
)
from src.errors import DatasetFormatError, EmptyDatasetError


def idx_images(count, side=28, magic=0x00000803, fill=None):
    header = struct.pack(">IIII", magic, count, side, side)
    pixels = bytes(fill if fill is not None else (i % 256 for i in range(count * side * side)))
    return header + pixels


def idx_labels(labels, magic=0x00000801):
    return struct.pack(">II", magic, len(labels)) + bytes(labels)


@pytest.fixture
def mnist_files(tmp_path):
    def write(images, labels):
        images_path = tmp_path / "images-idx3-ubyte"
        labels_path = tmp_path / "labels-idx1-ubyte"
        images_path.write_bytes(images)
        labels_path.write_bytes(labels)
        return images_path, labels_path

    return write


def cifar_record(label, value=0):
    return bytes([label]) + bytes([value]) * 1024 + bytes([value // 2]) * 1024 + bytes([255]) * 1024


class TestMnist:
    def test_three_image_fixture(self, mnist_files):
        dataset = load_mnist(*mnist_files(idx_images(3), idx_labels([7, 0, 9])))
        assert len(dataset) == 3
        assert dataset.image_shape == (28, 28, 1)
        assert dataset.labels.tolist() == [7, 0, 9]
        assert dataset.class_count == 10

    def test_pixel_scaling(self, mnist_files):
        pixels = [0] * 784
        pixels[1] = 255
        dataset = load_mnist(*mnist_files(idx_images(1, fill=pixels), idx_labels([3])))
        image, _ = dataset.sample(0)
        assert image[0, 0, 0] == 0.0
        assert image[0, 1, 0] == 1.0

    def test_gzip(self, tmp_path):
        images_path = tmp_path / "images.gz"
        labels_path = tmp_path / "labels.gz"
        images_path.write_bytes(gzip.compress(idx_images(2)))
        labels_path.write_bytes(gzip.compress(idx_labels([1, 2])))
        assert len(load_mnist(images_path, labels_path)) == 2

    def test_bad_magic(self, mnist_files):
        with pytest.raises(DatasetFormatError) as caught:
            load_mnist(*mnist_files(idx_images(1, magic=0x00000802), idx_labels([1])))
        assert caught.value.offset == 0
        assert "byte offset 0" in str(caught.value)

    def test_truncated_data(self, mnist_files):
        raw = idx_images(2)[:-10]
        with pytest.raises(DatasetFormatError) as caught:
            load_mnist(*mnist_files(raw, idx_labels([1, 2])))
        assert caught.value.offset == len(raw)

    def test_truncated_header(self, mnist_files):
        with pytest.raises(DatasetFormatError):
            load_mnist(*mnist_files(b"\x00\x00", idx_labels([1])))

    def test_count_mismatch(self, mnist_files):
        with pytest.raises(DatasetFormatError) as caught:
            load_mnist(*mnist_files(idx_images(2), idx_labels([1, 2, 3])))
        assert caught.value.offset == 4

    def test_invalid_label(self, mnist_files):
        with pytest.raises(DatasetFormatError) as caught:
            load_mnist(*mnist_files(idx_images(2), idx_labels([1, 12])))
        assert caught.value.offset == 9


class TestCifar:
    def test_two_record_fixture(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(cifar_record(4, 200) + cifar_record(9, 0))
        dataset = load_cifar10([path])
        assert len(dataset) == 2
        assert dataset.image_shape == (32, 32, 3)
        assert dataset.labels.tolist() == [4, 9]
        image, _ = dataset.sample(0)
        np.testing.assert_allclose(image[5, 7], [200 / 255, 100 / 255, 1.0])

    def test_length_not_multiple(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(bytes(3072))
        with pytest.raises(DatasetFormatError):
            load_cifar10([path])

    def test_invalid_label(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(cifar_record(1) + cifar_record(11))
        with pytest.raises(DatasetFormatError) as caught:
            load_cifar10([path])
        assert caught.value.offset == 3073

    def test_no_batches(self):
        with pytest.raises(EmptyDatasetError):
            load_cifar10([])


class TestSynthetic:
    def test_deterministic(self):
        first = synth_dataset(seed=5, sample_count=6)
        second = synth_dataset(seed=5, sample_count=6)
        np.testing.assert_array_equal(first.images, second.images)

    def test_alternating_labels(self):
        assert synth_dataset(class_count=2, sample_count=4).labels.tolist() == [0, 1, 0, 1]

    def test_pixels_in_unit_range(self):
        images = synth_dataset(shape=(8, 8, 3), sample_count=20).images
        assert images.min() >= 0.0
        assert images.max() <= 1.0
        assert images.std() > 0.1

    def test_classes_differ(self):
        dataset = synth_dataset(class_count=10, sample_count=10)
        assert not np.allclose(dataset.images[0], dataset.images[1])


class TestDataset:
    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            Dataset("empty", np.zeros((0, 2, 2, 1)), np.zeros(0, dtype=np.int64), 2)

    def test_select_is_seeded_and_distinct(self):
        dataset = synth_dataset(sample_count=30)
        chosen = dataset.select(10, seed=3)
        assert chosen == dataset.select(10, seed=3)
        assert len(set(chosen)) == 10

    def test_select_caps_at_size(self, caplog):
        dataset = synth_dataset(sample_count=5)
        assert sorted(dataset.select(9, seed=0)) == [0, 1, 2, 3, 4]
        assert "using all" in caplog.text


class TestImageFiles:
    def test_grayscale_bytes(self, tmp_path):
        image = np.array([[0.0, 1.0], [0.5, 2.0]])[..., None]
        path = write_image(image, tmp_path / "x.pgm")
        assert path.read_bytes() == b"P5 2 2 255\n" + bytes([0, 255, 128, 255])

    def test_color_header(self, tmp_path):
        path = write_image(np.zeros((32, 32, 3)), tmp_path / "x.ppm")
        raw = path.read_bytes()
        assert raw.startswith(b"P6 32 32 255\n")
        assert len(raw) == len(b"P6 32 32 255\n") + 32 * 32 * 3

    def test_read_back(self, tmp_path, rng):
        image = rng.uniform(size=(5, 7, 3))
        restored = read_image(write_image(image, tmp_path / "y.ppm"))
        np.testing.assert_array_equal(restored, np.round(image * 255).astype(np.uint8))

    def test_header_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([10, 20]))
        assert read_image(path).reshape(-1).tolist() == [10, 20]

    def test_rejects_two_channels(self, tmp_path):
        with pytest.raises(ValueError):
            write_image(np.zeros((2, 2, 2)), tmp_path / "z.pgm")


class TestLossCurve:
    def test_lines(self, tmp_path):
        path = write_loss_curve([0.5, 0.25, 1e-7], tmp_path / "loss.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "1,0.5"
        assert lines[2].startswith("3,")
        assert read_loss_curve(path) == [0.5, 0.25, 1e-7]

    def test_empty_history(self, tmp_path):
        path = write_loss_curve([], tmp_path / "loss.csv")
        assert path.read_text() == ""
        assert read_loss_curve(path) == []

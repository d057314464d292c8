import struct

import numpy as np
import pytest

from ansguard.datasets import (
    CIFAR10_DIR,
    CIFAR10_RECORD,
    CIFAR100_DIR,
    CIFAR100_FILES,
    CIFAR100_RECORD,
    DATA_ENV,
    MNIST_FILES,
    LabeledImageSet,
    batches,
    data_dir,
    has_dataset,
    load_cifar10_bin,
    load_cifar100_bin,
    load_dataset,
    load_mnist_idx,
    stratified_indices,
    subsample,
    split,
    synthetic_gaussians,
    write_mnist_idx,
)
from ansguard.errors import ConfigError, DataMissingError, FormatError, LengthError, ShapeError


@pytest.fixture
def idx_pair(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(5, 4, 4), dtype=np.uint8)
    labels = np.array([0, 3, 9, 1, 1], dtype=np.uint8)
    images, label_file = tmp_path / "img.idx", tmp_path / "lbl.idx"
    write_mnist_idx(images, label_file, pixels, labels)
    return images, label_file, pixels, labels


def test_mnist_idx_scales_pixels(idx_pair):
    images, labels_path, pixels, labels = idx_pair
    data = load_mnist_idx(images, labels_path)
    assert data.images.shape == (5, 1, 4, 4)
    np.testing.assert_allclose(data.images[:, 0], pixels / 255.0, rtol=1e-6)
    np.testing.assert_array_equal(data.labels, labels)
    assert data.images.min() >= 0 and data.images.max() <= 1


def test_mnist_idx_wrong_magic(idx_pair):
    images, labels_path, *_ = idx_pair
    raw = bytearray(images.read_bytes())
    raw[3] = 0x01
    images.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_mnist_idx(images, labels_path)


def test_mnist_idx_truncated_payload(idx_pair):
    images, labels_path, *_ = idx_pair
    images.write_bytes(images.read_bytes()[:-3])
    with pytest.raises(LengthError):
        load_mnist_idx(images, labels_path)


def test_mnist_idx_trailing_bytes(idx_pair):
    images, labels_path, *_ = idx_pair
    labels_path.write_bytes(labels_path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_mnist_idx(images, labels_path)


def test_mnist_idx_count_mismatch(tmp_path, rng):
    images, labels_path = tmp_path / "i", tmp_path / "l"
    write_mnist_idx(images, labels_path, rng.integers(0, 256, (3, 2, 2)), [1, 2])
    with pytest.raises(FormatError):
        load_mnist_idx(images, labels_path)


def test_mnist_missing_file(tmp_path):
    with pytest.raises(DataMissingError):
        load_mnist_idx(tmp_path / "nope", tmp_path / "nope2")


def test_cifar10_records_are_channel_major(tmp_path):
    pixels = np.arange(3 * 32 * 32, dtype=np.int64) % 256
    record = bytes([7]) + pixels.astype(np.uint8).tobytes()
    path = tmp_path / "batch.bin"
    path.write_bytes(record * 2)
    data = load_cifar10_bin([path])
    assert len(data) == 2 and data.classes == 10
    assert data.labels.tolist() == [7, 7]
    expected = pixels.reshape(3, 32, 32) / 255.0
    np.testing.assert_allclose(data.images[1], expected, rtol=1e-6)


def test_cifar10_partial_record(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(b"\x00" * (CIFAR10_RECORD + 5))
    with pytest.raises(FormatError):
        load_cifar10_bin([path])


def test_cifar100_keeps_fine_label(tmp_path):
    path = tmp_path / "train.bin"
    path.write_bytes(bytes([4, 57]) + bytes(3 * 32 * 32))
    data = load_cifar100_bin([path])
    assert data.labels.tolist() == [57]
    assert data.classes == 100


def test_labeled_set_validation():
    with pytest.raises(ShapeError):
        LabeledImageSet(np.zeros((2, 1, 2, 2)), np.zeros(3, dtype=np.int64), 2, "x")
    with pytest.raises(ConfigError):
        LabeledImageSet(np.full((1, 1, 2, 2), 1.5), np.zeros(1, dtype=np.int64), 2, "x")
    with pytest.raises(ConfigError):
        LabeledImageSet(np.zeros((1, 1, 2, 2)), np.array([2]), 2, "x")


def test_synthetic_is_deterministic_and_balanced():
    a = synthetic_gaussians(n=40, classes=4, seed=9)
    b = synthetic_gaussians(n=40, classes=4, seed=9)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [10, 10, 10, 10]
    assert a.input_shape == (1, 8, 8)


def test_stratified_quotas_follow_class_shares():
    labels = np.array([0] * 6 + [1] * 4)
    index = stratified_indices(labels, 2, 5, seed=0)
    assert len(index) == 5
    assert np.all(np.diff(index) > 0)
    assert np.bincount(labels[index]).tolist() == [3, 2]
    np.testing.assert_array_equal(index, stratified_indices(labels, 2, 5, seed=0))


def test_stratified_rejects_bad_size():
    with pytest.raises(ConfigError):
        stratified_indices(np.zeros(3, dtype=np.int64), 2, 4, seed=0)
    with pytest.raises(ConfigError):
        stratified_indices(np.zeros(3, dtype=np.int64), 2, 0, seed=0)


def test_subsample_and_split(synthetic):
    small = subsample(synthetic, 16, seed=1)
    assert len(small) == 16
    assert np.bincount(small.labels).tolist() == [8, 8]
    train, test = split(synthetic, 0.25, seed=1)
    assert len(train) + len(test) == len(synthetic)
    assert len(test) == 16
    train_rows = {row.tobytes() for row in train.images}
    assert not any(row.tobytes() in train_rows for row in test.images)


def test_batches_cover_every_item(synthetic):
    seen = np.concatenate([labels for _, labels in batches(synthetic, 10, shuffle=True, seed=4)])
    assert sorted(seen.tolist()) == sorted(synthetic.labels.tolist())
    sizes = [len(labels) for _, labels in batches(synthetic, 10)]
    assert sizes == [10] * 6 + [4]
    with pytest.raises(ConfigError):
        next(batches(synthetic, 0))


def test_data_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(DATA_ENV, str(tmp_path / "env"))
    assert data_dir(tmp_path / "explicit") == tmp_path / "explicit"
    assert data_dir() == tmp_path / "env"
    monkeypatch.delenv(DATA_ENV)
    assert data_dir().name == "data"


def test_load_dataset_finds_mnist_files(tmp_path, rng):
    for split_name, (images, labels) in MNIST_FILES.items():
        write_mnist_idx(tmp_path / images, tmp_path / labels, rng.integers(0, 256, (4, 28, 28)), [0, 1, 2, 3])
    assert has_dataset("mnist", tmp_path)
    assert not has_dataset("cifar10", tmp_path)
    assert len(load_dataset("mnist", "train", tmp_path)) == 4
    (tmp_path / CIFAR10_DIR).mkdir()
    assert not has_dataset("cifar10", tmp_path)


def test_cifar100_files_are_detected(tmp_path):
    folder = tmp_path / CIFAR100_DIR
    folder.mkdir()
    assert not has_dataset("cifar100", tmp_path)
    for (name,) in CIFAR100_FILES.values():
        (folder / name).write_bytes(bytes([3, 42]) + b"\x80" * (CIFAR100_RECORD - 2))
    assert has_dataset("cifar100", tmp_path)
    data = load_dataset("cifar100", "test", tmp_path)
    assert data.labels.tolist() == [42]


def test_load_dataset_unknown_and_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset("imagenet", "test", tmp_path)
    with pytest.raises(DataMissingError):
        load_dataset("cifar10", "test", tmp_path)
    assert has_dataset("synthetic", tmp_path)
    assert len(load_dataset("synthetic", "train")) == 512


def test_idx_header_layout(idx_pair):
    images, labels_path, *_ = idx_pair
    assert struct.unpack(">IIII", images.read_bytes()[:16]) == (0x803, 5, 4, 4)

import hashlib

import numpy as np
import pytest

from dlcbench.datasets import (SyntheticSpec, ingest_dataset,
                               load_cifar_binary, load_idx_dataset, read_idx,
                               synth_dataset, write_idx)
from dlcbench.errors import ConfigError, DataError


def checksum(dataset):
    h = hashlib.sha256()
    for arr in (dataset.train_images, dataset.train_labels,
                dataset.test_images, dataset.test_labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def test_synth_deterministic():
    spec = SyntheticSpec(class_count=3, samples_per_class=10, test_per_class=4,
                         image_side=8, blob_seed=11)
    assert checksum(synth_dataset(spec)) == checksum(synth_dataset(spec))


def test_synth_blob_seed_changes_patterns():
    a = synth_dataset(SyntheticSpec(class_count=2, samples_per_class=4,
                                    test_per_class=2, image_side=8, blob_seed=1))
    b = synth_dataset(SyntheticSpec(class_count=2, samples_per_class=4,
                                    test_per_class=2, image_side=8, blob_seed=2))
    assert checksum(a) != checksum(b)


def test_synth_tally():
    spec = SyntheticSpec(class_count=10, samples_per_class=100, test_per_class=5)
    dataset = synth_dataset(spec)
    assert len(dataset.train_images) == 1000
    counts = np.bincount(dataset.train_labels, minlength=10)
    np.testing.assert_array_equal(counts, np.full(10, 100))


def test_synth_classes_have_distinct_means():
    spec = SyntheticSpec(class_count=4, samples_per_class=20, test_per_class=5)
    dataset = synth_dataset(spec)
    means = [dataset.train_images[dataset.train_labels == c].mean(axis=0)
             for c in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(means[i] - means[j]).max() > 5  # uint8 scale


def test_synth_linear_probe_separates_two_classes():
    spec = SyntheticSpec(class_count=2, samples_per_class=100, test_per_class=50,
                         image_side=8, noise=0.1, blob_seed=3)
    dataset = synth_dataset(spec)
    x = dataset.train_images.reshape(len(dataset.train_images), -1) / 255.0
    y = 2.0 * dataset.train_labels - 1.0
    design = np.hstack([x, np.ones((len(x), 1))])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    xt = dataset.test_images.reshape(len(dataset.test_images), -1) / 255.0
    pred = (np.hstack([xt, np.ones((len(xt), 1))]) @ coef > 0).astype(int)
    accuracy = (pred == dataset.test_labels).mean()
    assert accuracy > 0.9


def write_cifar_file(path, images, labels):
    records = []
    for img, label in zip(images, labels):
        planes = img.transpose(2, 0, 1).tobytes()
        records.append(bytes([label]) + planes)
    path.write_bytes(b"".join(records))


def test_cifar_binary_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    train = rng.integers(0, 256, size=(10, 32, 32, 3), dtype=np.uint8)
    train_labels = rng.integers(0, 4, size=10)
    test = rng.integers(0, 256, size=(6, 32, 32, 3), dtype=np.uint8)
    test_labels = rng.integers(0, 4, size=6)
    write_cifar_file(tmp_path / "train.bin", train, train_labels)
    write_cifar_file(tmp_path / "test.bin", test, test_labels)
    dataset = load_cifar_binary(tmp_path, class_count=4)
    np.testing.assert_array_equal(dataset.train_images, train)
    np.testing.assert_array_equal(dataset.train_labels, train_labels)
    np.testing.assert_array_equal(dataset.test_images, test)
    np.testing.assert_array_equal(dataset.test_labels, test_labels)


def test_cifar_binary_truncated_file(tmp_path):
    (tmp_path / "train.bin").write_bytes(b"\x00" * 100)
    (tmp_path / "test.bin").write_bytes(b"\x00" * (1 + 3072))
    with pytest.raises(DataError):
        load_cifar_binary(tmp_path, class_count=4)


def test_cifar_binary_label_overflow(tmp_path):
    record = bytes([9]) + b"\x00" * 3072
    (tmp_path / "train.bin").write_bytes(record)
    (tmp_path / "test.bin").write_bytes(record)
    with pytest.raises(DataError):
        load_cifar_binary(tmp_path, class_count=4)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.integers(0, 256, size=(5, 6, 7), dtype=np.uint8)
    write_idx(tmp_path / "a.idx", arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), arr)


def test_idx_magic_mismatch(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x12\x34\x08\x01" + b"\x00" * 8)
    with pytest.raises(DataError):
        read_idx(tmp_path / "bad.idx")


def test_idx_truncated_data(tmp_path):
    import struct

    blob = struct.pack(">BBBB", 0, 0, 0x08, 1) + struct.pack(">I", 10) + b"\x00" * 4
    (tmp_path / "short.idx").write_bytes(blob)
    with pytest.raises(DataError):
        read_idx(tmp_path / "short.idx")


def test_idx_dataset_loader(tmp_path):
    rng = np.random.default_rng(2)
    write_idx(tmp_path / "train-images.idx",
              rng.integers(0, 256, size=(8, 8, 8), dtype=np.uint8))
    write_idx(tmp_path / "train-labels.idx",
              rng.integers(0, 3, size=8).astype(np.uint8))
    write_idx(tmp_path / "test-images.idx",
              rng.integers(0, 256, size=(4, 8, 8), dtype=np.uint8))
    write_idx(tmp_path / "test-labels.idx",
              rng.integers(0, 3, size=4).astype(np.uint8))
    dataset = load_idx_dataset(tmp_path, class_count=3)
    assert dataset.train_images.shape == (8, 8, 8, 1)  # grayscale gets a channel
    assert dataset.test_images.shape == (4, 8, 8, 1)


def test_ingest_unknown_format():
    with pytest.raises(ConfigError):
        ingest_dataset("parquet", None, 10)


def test_ingest_synthetic_honors_class_count():
    dataset = ingest_dataset("synthetic", None, 6,
                             SyntheticSpec(class_count=6, samples_per_class=5,
                                           test_per_class=2))
    assert dataset.class_count == 6
    with pytest.raises(ConfigError):
        ingest_dataset("synthetic", None, 7,
                       SyntheticSpec(class_count=6, samples_per_class=5,
                                     test_per_class=2))

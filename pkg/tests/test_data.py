import struct

import numpy as np
import pytest
import torch

from pssr import data as D
from pssr.synthetic import write_idx_images, write_idx_labels


@pytest.fixture
def mnist_root(tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("train", 40), ("test", 30)):
        images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        labels = np.tile(np.arange(10, dtype=np.uint8), n // 10)
        write_idx_images(tmp_path / D.MNIST_FILES[split][0], images)
        write_idx_labels(tmp_path / D.MNIST_FILES[split][1], labels)
    return tmp_path


def _cifar_record_file(path, n, num_classes=10, seed=0):
    rng = np.random.default_rng(seed)
    label_bytes = 2 if num_classes == 100 else 1
    records = rng.integers(0, 256, size=(n, label_bytes + 3072), dtype=np.uint8)
    records[:, :label_bytes] = rng.integers(0, num_classes, size=(n, label_bytes))
    path.write_bytes(records.tobytes())
    return records


def test_idx_round_trip_and_range(mnist_root):
    with pytest.warns(UserWarning):  # non-canonical sample count
        batches = D.load_dataset(D.DatasetSource("mnist", mnist_root, "test"), batch_size=16)
    images = torch.cat([b.images for b in batches])
    assert images.shape == (30, 1, 28, 28)
    assert images.min() >= 0 and images.max() <= 1


def test_load_is_deterministic(mnist_root):
    src = D.DatasetSource("mnist", mnist_root, "train")
    with pytest.warns(UserWarning):
        a = D.load_dataset(src, batch_size=8, seed=5)
    with pytest.warns(UserWarning):
        b = D.load_dataset(src, batch_size=8, seed=5)
    for x, y in zip(a, b):
        assert torch.equal(x.images, y.images)
        assert torch.equal(x.labels, y.labels)


def test_missing_file_names_path(tmp_path):
    src = D.DatasetSource("mnist", tmp_path, "test")
    with pytest.raises(D.IngestionError, match="t10k-images"):
        D.load_arrays(src)


def test_bad_magic_rejected(tmp_path):
    bad = tmp_path / D.MNIST_FILES["test"][0]
    bad.write_bytes(struct.pack(">iiii", 0xDEAD, 1, 28, 28) + bytes(28 * 28))
    with pytest.raises(D.IngestionError, match="magic"):
        D.load_arrays(D.DatasetSource("mnist", tmp_path, "test"))


def test_truncated_file_rejected(mnist_root):
    path = mnist_root / D.MNIST_FILES["test"][0]
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(D.IngestionError, match="corrupt"):
        D.load_arrays(D.DatasetSource("mnist", mnist_root, "test"))


def test_label_out_of_range(tmp_path):
    write_idx_images(tmp_path / D.MNIST_FILES["test"][0],
                     np.zeros((4, 28, 28), dtype=np.uint8))
    write_idx_labels(tmp_path / D.MNIST_FILES["test"][1],
                     np.array([1, 2, 3, 12], dtype=np.uint8))
    with pytest.raises(D.DataValidationError, match="label out of range"):
        D.load_arrays(D.DatasetSource("mnist", tmp_path, "test"))


def test_cifar10_parse(tmp_path):
    records = _cifar_record_file(tmp_path / "test_batch.bin", 12)
    with pytest.warns(UserWarning):
        images, labels = D.load_arrays(D.DatasetSource("cifar10", tmp_path, "test"))
    assert images.shape == (12, 3, 32, 32)
    assert torch.equal(labels, torch.from_numpy(records[:, 0].astype(np.int64)))


def test_cifar100_uses_fine_label(tmp_path):
    records = _cifar_record_file(tmp_path / "test.bin", 6, num_classes=100)
    with pytest.warns(UserWarning):
        _, labels = D.load_arrays(D.DatasetSource("cifar100", tmp_path, "test"))
    assert torch.equal(labels, torch.from_numpy(records[:, 1].astype(np.int64)))


def test_cifar_corrupt_size(tmp_path):
    (tmp_path / "test_batch.bin").write_bytes(bytes(3072))  # not a multiple of 3073
    with pytest.raises(D.IngestionError, match="multiple"):
        D.load_arrays(D.DatasetSource("cifar10", tmp_path, "test"))


def test_take_subset_stratified_and_deterministic(mnist_root):
    src = D.DatasetSource("mnist", mnist_root, "train")
    with pytest.warns(UserWarning):
        a = D.take_subset(src, k=20, seed=0, batch_size=64)
    with pytest.warns(UserWarning):
        b = D.take_subset(src, k=20, seed=0, batch_size=64)
    assert torch.equal(a[0].images, b[0].images)
    counts = torch.bincount(a[0].labels, minlength=10)
    assert (counts == 2).all()  # 20 over 10 classes, exactly stratified


def test_take_subset_too_large(mnist_root):
    with pytest.warns(UserWarning):
        with pytest.raises(D.DataValidationError, match="exceeds"):
            D.take_subset(D.DatasetSource("mnist", mnist_root, "train"), k=41, seed=0)


def test_cache_round_trip_bit_identical(tmp_path):
    g = torch.Generator().manual_seed(2)
    images = torch.rand((9, 1, 5, 5), generator=g)
    labels = torch.arange(9) % 3
    path = tmp_path / "split.bin"
    D.save_cache(path, images, labels, provenance={"seed": 2})
    loaded_images, loaded_labels = D.load_cache(path)
    assert torch.equal(loaded_images, images)
    assert torch.equal(loaded_labels, labels)
    assert path.with_suffix(".bin.json").exists()


def test_cache_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOTMAGIC" + bytes(64))
    with pytest.raises(D.IngestionError, match="magic"):
        D.load_cache(path)


def test_image_batch_invariants():
    ok = torch.rand(3, 1, 4, 4)
    with pytest.raises(D.DataValidationError):
        D.ImageBatch(ok * float("nan"), torch.zeros(3, dtype=torch.int64))
    with pytest.raises(D.DataValidationError):
        D.ImageBatch(ok + 1.0, torch.zeros(3, dtype=torch.int64))
    with pytest.raises(D.DataValidationError):
        D.ImageBatch(ok, torch.zeros(2, dtype=torch.int64))
    with pytest.raises(D.DataValidationError):
        D.ImageBatch(ok[:0], torch.zeros(0, dtype=torch.int64))


def test_flatten_batches_round_trip():
    g = torch.Generator().manual_seed(4)
    images = torch.rand((10, 1, 3, 3), generator=g)
    labels = torch.arange(10) % 4
    batches = D.to_batches(images, labels, batch_size=3)
    flat = D.flatten_batches(batches)
    assert torch.equal(flat.images, images)
    assert torch.equal(flat.labels, labels)


def test_source_validation():
    with pytest.raises(D.DataValidationError):
        D.DatasetSource("imagenet", ".", "test")
    with pytest.raises(D.DataValidationError):
        D.DatasetSource("mnist", ".", "val")

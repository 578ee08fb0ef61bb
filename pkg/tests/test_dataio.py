from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsd.dataio import (
    Dataset,
    batches,
    load_idx,
    load_mnist_split,
    permute_pixels,
    read_idx_labels,
    write_idx_images,
    write_idx_labels,
)
from qsd.errors import DataFormatError
from qsd.stochastics import RngStream


def write_fixture(tmp_path, n=4, image_magic=2051, label_magic=2049, rows=28, cols=28,
                  n_labels=None, drop_bytes=0, labels=None):
    """Hand-built IDX files: pixel k of image i has value (i * 31 + k) % 256."""
    pixels = bytes((i * 31 + k) % 256 for i in range(n) for k in range(rows * cols))
    img = struct.pack(">IIII", image_magic, n, rows, cols) + pixels
    if drop_bytes:
        img = img[:-drop_bytes]
    labels = list(range(n)) if labels is None else labels
    n_labels = len(labels) if n_labels is None else n_labels
    lab = struct.pack(">II", label_magic, n_labels) + bytes(labels)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(img)
    lp.write_bytes(lab)
    return ip, lp


def test_fixture_values(tmp_path):
    ds = load_idx(*write_fixture(tmp_path))
    assert ds.images.shape == (4, 784) and ds.images.dtype == np.float64
    assert ds.images[0, 0] == 0.0
    assert ds.images[1, 0] == 31 / 255
    assert ds.images[2, 5] == ((2 * 31 + 5) % 256) / 255
    assert ds.images[3, 783] == ((3 * 31 + 783) % 256) / 255
    assert ds.labels.tolist() == [0, 1, 2, 3]
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_images_file_with_label_magic(tmp_path):
    with pytest.raises(DataFormatError) as info:
        load_idx(*write_fixture(tmp_path, image_magic=2049))
    assert info.value.field == "magic"


def test_truncated_images(tmp_path):
    with pytest.raises(DataFormatError) as info:
        load_idx(*write_fixture(tmp_path, drop_bytes=10))
    assert info.value.field == "pixel data"


def test_wrong_dims(tmp_path):
    with pytest.raises(DataFormatError) as info:
        load_idx(*write_fixture(tmp_path, rows=14, cols=56))
    assert info.value.field == "dims"


def test_count_mismatch(tmp_path):
    with pytest.raises(DataFormatError) as info:
        load_idx(*write_fixture(tmp_path, labels=[0, 1, 2]))
    assert info.value.field == "count"


def test_label_header_mismatch(tmp_path):
    _, lp = write_fixture(tmp_path, n_labels=5)
    with pytest.raises(DataFormatError):
        read_idx_labels(lp)


def test_label_out_of_range(tmp_path):
    with pytest.raises(DataFormatError) as info:
        load_idx(*write_fixture(tmp_path, labels=[0, 1, 12, 3]))
    assert info.value.field == "label value"


def test_truncated_header(tmp_path):
    p = tmp_path / "short"
    p.write_bytes(b"\x00\x00\x08")
    with pytest.raises(DataFormatError):
        read_idx_labels(p)


def test_writer_round_trip(tmp_path):
    pix = (np.arange(3 * 784) % 256).reshape(3, 784)
    write_idx_images(tmp_path / "i", pix)
    write_idx_labels(tmp_path / "l", [9, 0, 4])
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(np.rint(ds.images * 255), pix)
    assert ds.labels.tolist() == [9, 0, 4]


def test_dataset_is_read_only(tmp_path):
    ds = load_idx(*write_fixture(tmp_path))
    with pytest.raises(ValueError):
        ds.images[0, 0] = 1.0


def toy(n=10, seed=0):
    s = RngStream(seed)
    return Dataset(s.uniform((n, 784)), np.arange(n) % 10, "toy")


def test_permute_preserves_multiset_and_stats():
    ds = toy(6)
    out = permute_pixels(ds, RngStream(1))
    for a, b in zip(ds.images, out.images):
        assert np.array_equal(np.sort(a), np.sort(b))
        assert a.mean() == pytest.approx(b.mean(), rel=1e-14)
        assert a.var() == pytest.approx(b.var(), rel=1e-12)
    assert np.array_equal(out.labels, ds.labels)
    assert not np.array_equal(out.images, ds.images)


def test_permute_per_sample_vs_shared():
    ds = Dataset(np.tile(np.arange(784.0) / 784, (3, 1)), np.zeros(3, dtype=np.int64))
    per = permute_pixels(ds, RngStream(2))
    shared = permute_pixels(ds, RngStream(2), shared=True)
    assert not np.array_equal(per.images[0], per.images[1])
    assert np.array_equal(shared.images[0], shared.images[1])


def test_permute_reproducible_and_pure():
    ds = toy(4)
    before = ds.images.copy()
    a = permute_pixels(ds, RngStream(3))
    b = permute_pixels(ds, RngStream(3))
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(ds.images, before)


def test_batch_sizes():
    assert [len(y) for _, y in batches(toy(10), 4)] == [4, 4, 2]


def test_batches_without_stream_keep_order():
    ds = toy(10)
    labels = np.concatenate([y for _, y in batches(ds, 3)])
    assert np.array_equal(labels, ds.labels)


def test_batches_same_seed_same_sequence():
    ds = toy(20)
    a = [y.tolist() for _, y in batches(ds, 6, RngStream(5))]
    b = [y.tolist() for _, y in batches(ds, 6, RngStream(5))]
    assert a == b


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 200), batch=st.integers(1, 70), seed=st.integers(0, 2**32))
def test_every_sample_once_per_epoch(n, batch, seed):
    images = np.zeros((n, 784))
    images[:, 0] = np.arange(n)
    ds = Dataset(images, np.arange(n) % 10)
    seen = []
    for x, _ in batches(ds, batch, RngStream(seed)):
        assert 1 <= x.shape[0] <= batch
        seen += x[:, 0].astype(int).tolist()
    assert sorted(seen) == list(range(n))


def test_reference_mnist(mnist_dir):
    train = load_mnist_split(mnist_dir, "train")
    test = load_mnist_split(mnist_dir, "test")
    assert len(train) == 60000 and len(test) == 10000
    assert train.labels.min() == 0 and train.labels.max() == 9
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0

"""Synthetic dataset, IDX loader, and the stratified split."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunekit import data


def write_idx_pair(tmp_path, images, labels):
    """Hand-build IDX files with struct, no shared code with the loader."""
    n, h, w = images.shape
    ipath = str(tmp_path / "imgs.idx")
    lpath = str(tmp_path / "labs.idx")
    with open(ipath, "wb") as fh:
        fh.write(struct.pack(">IIII", 2051, n, h, w))
        fh.write(images.astype(np.uint8).tobytes())
    with open(lpath, "wb") as fh:
        fh.write(struct.pack(">II", 2049, n))
        fh.write(labels.astype(np.uint8).tobytes())
    return ipath, lpath


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def test_labeled_set_validates_shapes():
    with pytest.raises(data.DataError):
        data.LabeledImageSet(np.zeros((4, 16, 16)), np.zeros(4, dtype=int), 2)
    with pytest.raises(data.DataError):
        data.LabeledImageSet(np.zeros((4, 1, 8, 8)), np.zeros(3, dtype=int), 2)
    with pytest.raises(data.DataError):
        data.LabeledImageSet(np.zeros((2, 1, 8, 8)), np.array([0, 5]), 2)


def test_subset_picks_rows():
    ds = data.LabeledImageSet(np.arange(32, dtype=float).reshape(4, 1, 2, 4),
                              np.array([0, 1, 0, 1]), 2)
    sub = ds.subset([2, 0])
    assert len(sub) == 2
    assert np.array_equal(sub.labels, [0, 0])
    assert np.array_equal(sub.images[0], ds.images[2])


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synthetic_shapes_and_range():
    ds = data.generate_synthetic(10, num_classes=6, image_size=12, seed=0)
    assert ds.images.shape == (60, 1, 12, 12)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.array_equal(np.sort(np.unique(ds.labels)), np.arange(6))
    counts = np.bincount(ds.labels)
    assert (counts == 10).all()


def test_synthetic_deterministic_and_seed_sensitive():
    a = data.generate_synthetic(8, seed=3)
    b = data.generate_synthetic(8, seed=3)
    c = data.generate_synthetic(8, seed=4)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)


def test_synthetic_classes_differ():
    ds = data.generate_synthetic(30, num_classes=4, image_size=16, noise=0.05, seed=1)
    means = [ds.images[ds.labels == c].mean(axis=0).ravel() for c in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(means[i] - means[j]) > 0.5


def test_synthetic_rejects_bad_args():
    with pytest.raises(data.DataError):
        data.generate_synthetic(0)
    with pytest.raises(data.DataError):
        data.generate_synthetic(5, num_classes=1)


# ---------------------------------------------------------------------------
# IDX loader
# ---------------------------------------------------------------------------

def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(3, 4, 5), dtype=np.uint8)
    labels = np.array([2, 0, 1], dtype=np.uint8)
    ipath, lpath = write_idx_pair(tmp_path, images, labels)
    ds = data.load_idx(ipath, lpath)
    assert ds.images.shape == (3, 1, 4, 5)
    assert np.array_equal(ds.labels, labels)
    assert np.allclose(ds.images[:, 0], images / 255.0)


def test_idx_all_255_maps_to_ones(tmp_path):
    images = np.full((1, 2, 2), 255, dtype=np.uint8)
    ipath, lpath = write_idx_pair(tmp_path, images, np.array([0], dtype=np.uint8))
    ds = data.load_idx(ipath, lpath, num_classes=1)
    assert np.array_equal(ds.images, np.ones((1, 1, 2, 2)))


def test_idx_label_file_on_image_path_rejected(tmp_path):
    images = np.zeros((2, 3, 3), dtype=np.uint8)
    labels = np.array([0, 1], dtype=np.uint8)
    ipath, lpath = write_idx_pair(tmp_path, images, labels)
    with pytest.raises(data.DataError):
        data.load_idx(lpath, ipath)


def test_idx_count_mismatch(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    ipath, _ = write_idx_pair(tmp_path, images, np.zeros(3, dtype=np.uint8))
    lpath = str(tmp_path / "short.idx")
    with open(lpath, "wb") as fh:
        fh.write(struct.pack(">II", 2049, 2))
        fh.write(bytes([0, 1]))
    with pytest.raises(data.DataError):
        data.load_idx(ipath, lpath)


def test_idx_truncated_payload(tmp_path):
    ipath = str(tmp_path / "trunc.idx")
    with open(ipath, "wb") as fh:
        fh.write(struct.pack(">IIII", 2051, 2, 4, 4))
        fh.write(bytes(10))   # needs 32
    lpath = str(tmp_path / "labs.idx")
    with open(lpath, "wb") as fh:
        fh.write(struct.pack(">II", 2049, 2))
        fh.write(bytes([0, 1]))
    with pytest.raises(data.DataError):
        data.load_idx(ipath, lpath)


# ---------------------------------------------------------------------------
# stratified split
# ---------------------------------------------------------------------------

def make_set(counts, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    images = rng.random((labels.size, 1, 4, 4))
    return data.LabeledImageSet(images, labels, len(counts))


def test_split_partitions_without_overlap():
    ds = make_set([10, 10, 10])
    train, val = data.holdout_split(ds, 0.3, seed=1)
    assert len(train) + len(val) == len(ds)
    # identify rows by their unique pixel content
    def keys(s):
        return {s.images[i].tobytes() for i in range(len(s))}
    assert keys(train) | keys(val) == keys(ds)
    assert not keys(train) & keys(val)


def test_split_is_stratified():
    ds = make_set([20, 40])
    train, val = data.holdout_split(ds, 0.25, seed=2)
    assert np.bincount(val.labels, minlength=2).tolist() == [5, 10]
    assert np.bincount(train.labels, minlength=2).tolist() == [15, 30]


def test_split_keeps_one_per_side_for_tiny_classes():
    ds = make_set([2, 50])
    train, val = data.holdout_split(ds, 0.05, seed=3)
    assert (val.labels == 0).sum() == 1
    assert (train.labels == 0).sum() == 1


def test_split_rejects_singleton_class():
    ds = make_set([1, 10])
    with pytest.raises(data.DataError):
        data.holdout_split(ds, 0.5)


def test_split_rejects_bad_fraction():
    ds = make_set([4, 4])
    for f in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(data.DataError):
            data.holdout_split(ds, f)


def test_split_deterministic_per_seed():
    ds = make_set([12, 12])
    t1, v1 = data.holdout_split(ds, 0.25, seed=5)
    t2, v2 = data.holdout_split(ds, 0.25, seed=5)
    t3, v3 = data.holdout_split(ds, 0.25, seed=6)
    assert np.array_equal(v1.images, v2.images)
    assert np.array_equal(t1.images, t2.images)
    assert not np.array_equal(v1.images, v3.images)


@given(st.lists(st.integers(2, 25), min_size=2, max_size=5),
       st.floats(0.05, 0.95), st.integers(0, 10))
@settings(max_examples=40, deadline=None)
def test_split_property_every_class_on_both_sides(counts, frac, seed):
    ds = make_set(counts, seed=seed)
    train, val = data.holdout_split(ds, frac, seed=seed)
    for c in range(len(counts)):
        assert (train.labels == c).sum() >= 1
        assert (val.labels == c).sum() >= 1
    assert len(train) + len(val) == sum(counts)

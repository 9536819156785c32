import os
import pickle

import numpy as np
import pytest

from labelbridge.data import DataConfig, load_dataset


def small(name="shapes-4", **kw):
    kw = {"train_count": 32, "test_count": 16, **kw}
    return DataConfig(name=name, **kw)


def test_shapes_layout_and_range():
    ds = load_dataset("shapes-4")
    assert ds.train_x.shape == (512, 3, 16, 16) and ds.train_x.dtype == np.float32
    assert ds.test_x.shape == (256, 3, 16, 16)
    assert ds.train_y.dtype == np.int64 and ds.test_y.dtype == np.int64
    assert ds.num_classes == 4 and ds.class_ids == (0, 1, 2, 3)
    for arr in [ds.train_x, ds.test_x]:
        assert float(arr.min()) >= -1.0 and float(arr.max()) <= 1.0
    assert set(ds.train_y) == set(range(4))
    assert ds.label_shape == (3, 16, 16)


def test_shapes_deterministic_and_seed_sensitive():
    a = load_dataset(small())
    b = load_dataset(small())
    c = load_dataset(small(seed=1))
    assert np.array_equal(a.train_x, b.train_x) and np.array_equal(a.train_y, b.train_y)
    assert np.array_equal(a.test_x, b.test_x)
    assert not np.array_equal(a.train_x, c.train_x)


def test_shapes_exact_class_balance():
    ds = load_dataset(small())
    counts = np.bincount(ds.train_y, minlength=4)
    assert counts.tolist() == [8, 8, 8, 8]  # count % K == 0 here


def test_train_and_test_draw_from_separate_streams():
    ds = load_dataset(small(train_count=16, test_count=16))
    assert not np.array_equal(ds.train_x, ds.test_x)


def test_shapes_twelve_classes_cap():
    ds = load_dataset(small("shapes-12", train_count=24, test_count=12))
    assert ds.num_classes == 12
    assert set(ds.train_y) == set(range(12))
    with pytest.raises(ValueError, match="12"):
        load_dataset(small("shapes-13"))
    with pytest.raises(ValueError):
        load_dataset(small("shapes-0"))
    with pytest.raises(ValueError):
        load_dataset(small("shapes-x"))
    with pytest.raises(ValueError):
        load_dataset(small(resolution=4))


def test_class_subset_filters_and_remaps():
    full = load_dataset(small("shapes-6", train_count=60, test_count=30))
    sub = load_dataset(small("shapes-6", train_count=60, test_count=30, class_subset=(5, 2)))
    assert sub.num_classes == 2
    assert sub.class_ids == (2, 5)  # sorted original ids, index = new label
    mask = np.isin(full.train_y, [2, 5])
    assert np.array_equal(sub.train_x, full.train_x[mask])
    expect = np.where(full.train_y[mask] == 2, 0, 1)
    assert np.array_equal(sub.train_y, expect)
    assert set(sub.test_y) <= {0, 1}


def test_class_subset_validation():
    with pytest.raises(ValueError):
        load_dataset(small(class_subset=(0, 9)))
    with pytest.raises(ValueError):
        load_dataset(small(class_subset=()))


def test_unknown_dataset_name():
    with pytest.raises(ValueError, match="shapes-K"):
        load_dataset("imagenet")


# --------------------------------------------------- standard pickle layouts


def fake_cifar10(root, rows=4):
    base = os.path.join(root, "cifar-10-batches-py")
    os.makedirs(base)
    rng = np.random.default_rng(0)
    for i in range(1, 6):
        record = {
            b"data": rng.integers(0, 256, size=(rows, 3072), dtype=np.uint8),
            b"labels": [int(v) for v in rng.integers(0, 10, size=rows)],
        }
        with open(os.path.join(base, f"data_batch_{i}"), "wb") as fh:
            pickle.dump(record, fh)
    record = {
        b"data": rng.integers(0, 256, size=(rows, 3072), dtype=np.uint8),
        b"labels": [int(v) for v in rng.integers(0, 10, size=rows)],
    }
    with open(os.path.join(base, "test_batch"), "wb") as fh:
        pickle.dump(record, fh)
    return base


def test_cifar10_pickle_loading(tmp_path):
    base = fake_cifar10(str(tmp_path))
    ds = load_dataset(DataConfig(name="cifar10", root=str(tmp_path), resolution=32))
    assert ds.train_x.shape == (20, 3, 32, 32) and ds.test_x.shape == (4, 3, 32, 32)
    assert ds.num_classes == 10
    # spot-check the affine pixel map against the raw bytes
    with open(os.path.join(base, "data_batch_1"), "rb") as fh:
        raw = pickle.load(fh, encoding="bytes")
    expect = -1.0 + 2.0 * raw[b"data"][0].reshape(3, 32, 32).astype(np.float32) / 255.0
    assert np.allclose(ds.train_x[0], expect, atol=1e-7)
    assert ds.train_y[0] == raw[b"labels"][0]


def test_cifar100_pickle_loading(tmp_path):
    base = os.path.join(str(tmp_path), "cifar-100-python")
    os.makedirs(base)
    rng = np.random.default_rng(1)
    for split, rows in [("train", 6), ("test", 3)]:
        record = {
            b"data": rng.integers(0, 256, size=(rows, 3072), dtype=np.uint8),
            b"fine_labels": [int(v) for v in rng.integers(0, 100, size=rows)],
        }
        with open(os.path.join(base, split), "wb") as fh:
            pickle.dump(record, fh)
    ds = load_dataset(DataConfig(name="cifar100", root=str(tmp_path), resolution=32))
    assert ds.train_x.shape == (6, 3, 32, 32) and ds.num_classes == 100


def test_cifar_error_paths(tmp_path):
    with pytest.raises(ValueError, match="root"):
        load_dataset(DataConfig(name="cifar10", resolution=32))
    with pytest.raises(ValueError, match="3x32x32"):
        load_dataset(DataConfig(name="cifar10", root=str(tmp_path), resolution=16))
    with pytest.raises(FileNotFoundError):
        load_dataset(DataConfig(name="cifar10", root=str(tmp_path), resolution=32))
    base = os.path.join(str(tmp_path), "cifar-10-batches-py")
    os.makedirs(base)
    with open(os.path.join(base, "data_batch_1"), "wb") as fh:
        fh.write(b"not a pickle at all")
    with pytest.raises(ValueError, match="could not parse"):
        load_dataset(DataConfig(name="cifar10", root=str(tmp_path), resolution=32))

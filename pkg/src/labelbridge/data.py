"""Dataset loading: a deterministic synthetic shapes generator for desk-scale
work, plus loaders for the standard 32x32 10/100-class pickle layouts.

All images come out as float32 (N, C, H, W) arrays normalized to the data
range (default [-1, 1]) with int64 class labels.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass

import numpy as np

_MAX_SHAPE_CLASSES = 12


@dataclass
class DataConfig:
    name: str = "shapes-4"
    root: str | None = None  # directory holding the standard pickle sets
    resolution: int = 16
    channels: int = 3
    train_count: int = 512
    test_count: int = 256
    seed: int = 0
    class_subset: tuple | None = None
    data_range: tuple = (-1.0, 1.0)


@dataclass
class Dataset:
    name: str
    num_classes: int
    data_range: tuple
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_ids: tuple  # original label ids, index = remapped label

    @property
    def label_shape(self):
        return tuple(self.train_x.shape[1:])


def _glyph_mask(kind, res, cy, cx):
    """Boolean res x res mask for glyph family `kind`, centered at (cy, cx)."""
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = 0.32 * res
    dist = np.sqrt(dy**2 + dx**2)
    cheb = np.maximum(np.abs(dy), np.abs(dx))
    if kind == 0:  # disk
        return dist <= r
    if kind == 1:  # filled square
        return cheb <= 0.85 * r
    if kind == 2:  # plus
        return ((np.abs(dy) <= 0.35 * r) | (np.abs(dx) <= 0.35 * r)) & (cheb <= 1.1 * r)
    if kind == 3:  # ring
        return (dist >= 0.55 * r) & (dist <= r)
    if kind == 4:  # triangle, apex up
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == 5:  # horizontal bar
        return (np.abs(dy) <= 0.4 * r) & (np.abs(dx) <= 1.4 * r)
    if kind == 6:  # vertical bar
        return (np.abs(dx) <= 0.4 * r) & (np.abs(dy) <= 1.4 * r)
    if kind == 7:  # diamond
        return np.abs(dy) + np.abs(dx) <= 1.2 * r
    if kind == 8:  # checkerboard patch
        q = max(2, res // 8)
        return ((yy // q + xx // q) % 2 == 0) & (cheb <= r)
    if kind == 9:  # X
        return (np.abs(np.abs(dy) - np.abs(dx)) <= 0.35 * r) & (cheb <= 1.1 * r)
    if kind == 10:  # square frame
        return (cheb >= 0.6 * r) & (cheb <= r)
    if kind == 11:  # dot grid
        return (dist <= r) & (yy % 4 < 2) & (xx % 4 < 2)
    raise ValueError(f"no glyph family {kind}")


def _make_shapes_split(num_classes, count, resolution, channels, rng, data_range):
    lo, hi = data_range
    width = hi - lo
    ys = np.arange(count) % num_classes
    rng.shuffle(ys)
    xs = np.empty((count, channels, resolution, resolution), dtype=np.float32)
    jitter = max(1, resolution // 8)
    for n in range(count):
        cy = (resolution - 1) / 2 + rng.integers(-jitter, jitter + 1)
        cx = (resolution - 1) / 2 + rng.integers(-jitter, jitter + 1)
        mask = _glyph_mask(int(ys[n]), resolution, cy, cx)
        img = np.empty((channels, resolution, resolution), dtype=np.float64)
        for c in range(channels):
            fg = rng.uniform(0.65, 1.0)
            bg = rng.uniform(0.0, 0.15)
            img[c] = lo + width * np.where(mask, fg, bg)
        img += rng.normal(0.0, 0.05 * width, size=img.shape)
        xs[n] = np.clip(img, lo, hi)
    return xs, ys.astype(np.int64)


def _generate_shapes(cfg, num_classes):
    if num_classes < 1:
        raise ValueError("shapes-K needs K >= 1")
    if num_classes > _MAX_SHAPE_CLASSES:
        raise ValueError(
            f"shapes-K supports at most {_MAX_SHAPE_CLASSES} glyph classes, got {num_classes}"
        )
    if cfg.resolution < 8:
        raise ValueError(f"shapes resolution must be >= 8, got {cfg.resolution}")
    train_rng = np.random.default_rng([cfg.seed, 0])
    test_rng = np.random.default_rng([cfg.seed, 1])
    train_x, train_y = _make_shapes_split(
        num_classes, cfg.train_count, cfg.resolution, cfg.channels, train_rng, cfg.data_range
    )
    test_x, test_y = _make_shapes_split(
        num_classes, cfg.test_count, cfg.resolution, cfg.channels, test_rng, cfg.data_range
    )
    return Dataset(
        name=cfg.name,
        num_classes=num_classes,
        data_range=tuple(cfg.data_range),
        train_x=train_x,
        train_y=train_y,
        test_x=test_x,
        test_y=test_y,
        class_ids=tuple(range(num_classes)),
    )


def _read_pickle(path):
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"{path} not found; pass the directory that holds the standard "
            f"pickle batches via the dataset root"
        )
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="bytes")
    except Exception as exc:  # corrupt or wrong file
        raise ValueError(f"{path}: could not parse pickle batch ({exc})") from exc


def _batch_arrays(record, label_key, data_range):
    lo, hi = data_range
    data = np.asarray(record[b"data"], dtype=np.float32).reshape(-1, 3, 32, 32)
    xs = lo + (hi - lo) * data / 255.0
    ys = np.asarray(record[label_key], dtype=np.int64)
    return xs.astype(np.float32), ys


def _load_cifar(cfg, fine):
    if cfg.root is None:
        raise ValueError(
            f"dataset {cfg.name!r} needs a root directory with the standard pickle files"
        )
    if cfg.resolution != 32 or cfg.channels != 3:
        raise ValueError(f"{cfg.name} is fixed at 3x32x32")
    if fine:
        base = os.path.join(cfg.root, "cifar-100-python")
        train = _batch_arrays(_read_pickle(os.path.join(base, "train")), b"fine_labels", cfg.data_range)
        test = _batch_arrays(_read_pickle(os.path.join(base, "test")), b"fine_labels", cfg.data_range)
        num_classes = 100
    else:
        base = os.path.join(cfg.root, "cifar-10-batches-py")
        parts = [
            _batch_arrays(_read_pickle(os.path.join(base, f"data_batch_{i}")), b"labels", cfg.data_range)
            for i in range(1, 6)
        ]
        train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
        test = _batch_arrays(_read_pickle(os.path.join(base, "test_batch")), b"labels", cfg.data_range)
        num_classes = 10
    return Dataset(
        name=cfg.name,
        num_classes=num_classes,
        data_range=tuple(cfg.data_range),
        train_x=train[0],
        train_y=train[1],
        test_x=test[0],
        test_y=test[1],
        class_ids=tuple(range(num_classes)),
    )


def _apply_subset(ds, subset):
    ids = tuple(sorted(int(c) for c in subset))
    if len(ids) < 1 or any(c < 0 or c >= ds.num_classes for c in ids):
        raise ValueError(f"class_subset {subset} invalid for {ds.num_classes} classes")
    remap = {orig: new for new, orig in enumerate(ids)}
    tr = np.isin(ds.train_y, ids)
    te = np.isin(ds.test_y, ids)
    return Dataset(
        name=ds.name,
        num_classes=len(ids),
        data_range=ds.data_range,
        train_x=ds.train_x[tr],
        train_y=np.asarray([remap[int(y)] for y in ds.train_y[tr]], dtype=np.int64),
        test_x=ds.test_x[te],
        test_y=np.asarray([remap[int(y)] for y in ds.test_y[te]], dtype=np.int64),
        class_ids=ids,
    )


def load_dataset(cfg):
    """Resolve a DataConfig (or bare dataset name) into arrays.

    Recognized names: "shapes-K" for K <= 12 (synthetic, deterministic given
    seed), "cifar10", "cifar100" (read from cfg.root).  class_subset filters
    to the listed original labels and remaps them to 0..k-1 in sorted order.
    """
    if isinstance(cfg, str):
        cfg = DataConfig(name=cfg)
    name = cfg.name.lower()
    if name.startswith("shapes-"):
        try:
            k = int(name.split("-", 1)[1])
        except ValueError:
            raise ValueError(f"bad shapes name {cfg.name!r}; expected e.g. shapes-4") from None
        ds = _generate_shapes(cfg, k)
    elif name == "cifar10":
        ds = _load_cifar(cfg, fine=False)
    elif name == "cifar100":
        ds = _load_cifar(cfg, fine=True)
    else:
        raise ValueError(
            f"unknown dataset {cfg.name!r}; expected shapes-K, cifar10, or cifar100"
        )
    if cfg.class_subset is not None:
        ds = _apply_subset(ds, cfg.class_subset)
    return ds

"""Datasets in IDX format (the MNIST file layout) plus two sources.

* :func:`mnist_subset` - the 5000-digit MNIST sample shipped with ``mlxtend``,
  split 4000/1000 (stratified, fixed seed).
* :func:`synthetic_digits` - procedurally drawn 28x28 glyphs so the pipeline
  runs with no downloads at all.
"""
from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np


class DataError(Exception):
    """Missing or malformed dataset files."""


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_DTYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
           0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped). Big-endian header and payload."""
    try:
        with _open(path) as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _DTYPES:
        raise DataError(f"{path}: unknown IDX element type 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dt = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) - header != expected:
        raise DataError(f"{path}: payload is {len(raw) - header} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=dt, offset=header).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def write_idx(path, arr) -> None:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise DataError(f"dtype {arr.dtype} has no IDX encoding")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload = arr.astype(_DTYPES[code], copy=False).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + payload)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise DataError(f"{directory}: missing {stem}")


def load_split(directory, split: str = "train"):
    """Load ``(images, labels)`` with images as float64 ``[N, H, W, 1]`` in [0, 1]."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"data directory not found: {d}")
    img_stem, lbl_stem = SPLIT_FILES[split]
    images, labels = read_idx(_find(d, img_stem)), read_idx(_find(d, lbl_stem))
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DataError(f"{d}: images {images.shape} and labels {labels.shape} do not match")
    return to_float(images), labels.astype(np.int64)


def to_float(images: np.ndarray) -> np.ndarray:
    return (np.asarray(images, dtype=np.float64) / 255.0)[..., None]


def write_split(directory, split: str, images_u8, labels) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    img_stem, lbl_stem = SPLIT_FILES[split]
    write_idx(d / img_stem, np.asarray(images_u8, dtype=np.uint8))
    write_idx(d / lbl_stem, np.asarray(labels, dtype=np.uint8))


def mnist_subset(seed: int = 0, n_test: int = 1000):
    """MNIST sample bundled with mlxtend as uint8 ``(x_train, y_train, x_test, y_test)``."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = np.rint(x).astype(np.uint8).reshape(-1, 28, 28)
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    per_class = n_test // len(classes)
    test_idx, train_idx = [], []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        test_idx.append(idx[:per_class])
        train_idx.append(idx[per_class:])
    tr = rng.permutation(np.concatenate(train_idx))
    te = rng.permutation(np.concatenate(test_idx))
    return x[tr], y[tr].astype(np.uint8), x[te], y[te].astype(np.uint8)


def _glyph(cls: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """Draw one noisy instance of class ``cls`` as a thick polyline."""
    # each class is a fixed stroke path in the unit square
    paths = [
        [(.3, .2), (.7, .2), (.8, .5), (.7, .8), (.3, .8), (.2, .5), (.3, .2)],
        [(.5, .15), (.5, .85)],
        [(.25, .25), (.7, .2), (.7, .45), (.3, .8), (.75, .8)],
        [(.25, .2), (.7, .25), (.45, .5), (.75, .7), (.25, .8)],
        [(.65, .85), (.65, .15), (.25, .6), (.8, .6)],
        [(.75, .2), (.3, .2), (.3, .45), (.7, .55), (.65, .8), (.25, .8)],
        [(.7, .15), (.3, .5), (.35, .8), (.7, .75), (.65, .5), (.3, .55)],
        [(.2, .2), (.8, .2), (.4, .85)],
        [(.5, .5), (.3, .3), (.5, .15), (.7, .3), (.3, .7), (.5, .85), (.7, .7), (.5, .5)],
        [(.7, .45), (.35, .4), (.4, .15), (.7, .2), (.7, .45), (.6, .85)],
    ]
    pts = np.array(paths[cls], dtype=np.float64)
    angle = rng.normal(0, 0.15)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    pts = (pts - 0.5) @ rot.T * rng.uniform(0.8, 1.1) + 0.5 + rng.normal(0, 0.04, size=2)
    pts = pts + rng.normal(0, 0.02, size=pts.shape)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dist = np.full(len(grid), np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        t = np.clip(((grid - a) @ ab) / max(ab @ ab, 1e-12), 0, 1)
        dist = np.minimum(dist, np.linalg.norm(grid - (a + t[:, None] * ab), axis=1))
    width = rng.uniform(0.04, 0.07)
    img = np.clip(1.5 - dist / width, 0, 1) ** 0.8
    img = img + rng.normal(0, 0.05, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8).reshape(size, size)


def synthetic_digits(n: int, seed: int = 0, size: int = 28):
    """``n`` balanced procedural glyph images (uint8) and labels."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10).astype(np.uint8)
    images = np.stack([_glyph(int(c), rng, size) for c in labels]) if n else np.zeros((0, size, size), np.uint8)
    return images, labels


def export(directory, source: str = "mnist", seed: int = 0, n_train: int = 4000, n_test: int = 1000) -> dict:
    """Write train/test IDX files for ``source`` ("mnist" or "synthetic")."""
    if source == "mnist":
        xtr, ytr, xte, yte = mnist_subset(seed, n_test)
    elif source == "synthetic":
        xtr, ytr = synthetic_digits(n_train, seed)
        xte, yte = synthetic_digits(n_test, seed + 1)
    else:
        raise DataError(f"unknown data source {source!r}")
    write_split(directory, "train", xtr, ytr)
    write_split(directory, "test", xte, yte)
    return {"train": len(ytr), "test": len(yte), "directory": os.fspath(directory)}

"""Datasets: IDX image/label files and a synthetic tall-vs-wide rectangles task."""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
SIDE = 28
WIDE, TALL = 0, 1


class DataError(ValueError):
    """Base class for dataset problems."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Features in [0, 1] (float32, one row per example) and integer labels."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float32)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise DataError("a dataset needs a non-empty 2-d feature array")
        if y.shape != (X.shape[0],):
            raise DataError("one label per example is required")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0:
            raise DataError("features must be finite and within [0, 1]")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.n_classes, name or self.name)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.X.shape, np.int64).tobytes())
        h.update(self.X.tobytes())
        h.update(self.y.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_header(buf: bytes, magic: int, ndims: int, what: str):
    size = 4 * (1 + ndims)
    if len(buf) < size:
        raise IdxTruncatedError(f"{what} file is shorter than its header")
    fields = struct.unpack_from(f">{1 + ndims}I", buf, 0)
    if fields[0] != magic:
        raise IdxMagicError(f"{what} file has magic {fields[0]}, expected {magic}")
    return fields[1:], size


def parse_idx_images(buf: bytes) -> np.ndarray:
    (count, rows, cols), off = _parse_header(buf, IMAGE_MAGIC, 3, "image")
    need = off + count * rows * cols
    if len(buf) < need:
        raise IdxTruncatedError(f"image file holds {len(buf)} bytes, header implies {need}")
    pix = np.frombuffer(buf, np.uint8, count * rows * cols, off)
    return pix.reshape(count, rows * cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (count,), off = _parse_header(buf, LABEL_MAGIC, 1, "label")
    if len(buf) < off + count:
        raise IdxTruncatedError(f"label file holds {len(buf)} bytes, header implies {off + count}")
    return np.frombuffer(buf, np.uint8, count, off)


def load_idx(images_path, labels_path, n_classes: int | None = None,
             name: str | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled by 1/255."""
    for p in (images_path, labels_path):
        if not os.path.exists(p):
            raise DataError(f"missing data file {p}")
    pix = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if pix.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{pix.shape[0]} images but {labels.shape[0]} labels")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    X = pix.astype(np.float32) / np.float32(255.0)
    return Dataset(X, labels.astype(np.int64), n_classes, name or Path(images_path).name)


def write_idx(dataset: Dataset, images_path, labels_path, shape=None) -> None:
    """Write a dataset as an IDX pair.  Features are quantized to bytes."""
    n, d = dataset.X.shape
    if shape is None:
        side = int(round(d ** 0.5))
        shape = (side, side) if side * side == d else (1, d)
    rows, cols = shape
    if rows * cols != d:
        raise DataError(f"image shape {shape} does not match feature dim {d}")
    if dataset.y.max() > 255:
        raise DataError("IDX labels are single bytes")
    pix = np.rint(dataset.X * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(dataset.y.astype(np.uint8).tobytes())


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(data_dir: Path, stem: str) -> Path | None:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"),
                 stem.replace("-idx", ".idx") + ".gz"):
        p = data_dir / cand
        if p.exists():
            return p
    return None


def load_idx_dir(data_dir, n_classes: int | None = None,
                 name: str = "idx") -> tuple[Dataset, Dataset]:
    """Load train and test splits stored under the MNIST file names.

    Without ``n_classes`` the class count is the largest label in either
    split plus one.
    """
    data_dir = Path(data_dir)
    paths = {}
    for split, (img, lab) in _MNIST_NAMES.items():
        ip, lp = _find(data_dir, img), _find(data_dir, lab)
        if ip is None or lp is None:
            raise DataError(f"{name} {split} files not found in {data_dir}")
        paths[split] = (ip, lp)
    if n_classes is None:
        n_classes = 1 + max(int(parse_idx_labels(_read_bytes(lp)).max(initial=0))
                            for _, lp in paths.values())
    return tuple(load_idx(ip, lp, n_classes=n_classes, name=f"{name}-{split}")
                 for split, (ip, lp) in paths.items())


def load_mnist(data_dir) -> tuple[Dataset, Dataset]:
    """Load the MNIST train and test splits from ``data_dir``."""
    return load_idx_dir(data_dir, 10, "mnist")


def save_idx_dir(train: Dataset, test: Dataset, data_dir) -> None:
    """Write both splits under the MNIST file names (the inverse of
    :func:`load_idx_dir`)."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    for ds, (img, lab) in zip((train, test), _MNIST_NAMES.values()):
        write_idx(ds, data_dir / img, data_dir / lab)


# ---------------------------------------------------------------------------
# synthetic rectangles


def render_rectangle(top: int, left: int, height: int, width: int) -> np.ndarray:
    img = np.zeros((SIDE, SIDE), np.float32)
    bottom, right = top + height - 1, left + width - 1
    img[top, left:right + 1] = 1.0
    img[bottom, left:right + 1] = 1.0
    img[top:bottom + 1, left] = 1.0
    img[top:bottom + 1, right] = 1.0
    return img


def rectangle_label(img) -> int:
    """Recover the label from a rendered outline: 0 if wider than tall."""
    img = np.asarray(img).reshape(SIDE, SIDE)
    rows = np.flatnonzero(img.any(axis=1))
    cols = np.flatnonzero(img.any(axis=0))
    height = rows[-1] - rows[0] + 1
    width = cols[-1] - cols[0] + 1
    return WIDE if width > height else TALL


def gen_rectangles(count: int, side_range: tuple[int, int] = (3, 26), seed: int = 0,
                   name: str = "rectangles") -> Dataset:
    """28x28 images with one rectangle outline each; label 0 iff width > height.

    Width and height are drawn uniformly from ``side_range`` (inclusive) and
    redrawn while equal, so squares never occur.
    """
    lo, hi = side_range
    if not 2 <= lo < hi <= SIDE:
        raise DataError(f"side_range must satisfy 2 <= lo < hi <= {SIDE}")
    if count < 1:
        raise DataError("count must be positive")
    rng = np.random.default_rng(seed)
    X = np.zeros((count, SIDE * SIDE), np.float32)
    y = np.zeros(count, np.int64)
    for i in range(count):
        h, w = rng.integers(lo, hi + 1, size=2)
        while h == w:
            h, w = rng.integers(lo, hi + 1, size=2)
        top = rng.integers(0, SIDE - h + 1)
        left = rng.integers(0, SIDE - w + 1)
        X[i] = render_rectangle(top, left, h, w).ravel()
        y[i] = WIDE if w > h else TALL
    return Dataset(X, y, 2, name)


def split_shards(n_or_dataset, workers: int, epoch_seed: int) -> list[np.ndarray]:
    """Shuffle example indices and cut them into ``workers`` near-equal shards."""
    n = n_or_dataset if isinstance(n_or_dataset, int) else len(n_or_dataset)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    perm = np.random.default_rng(epoch_seed).permutation(n)
    return [np.ascontiguousarray(s, dtype=np.int64) for s in np.array_split(perm, workers)]

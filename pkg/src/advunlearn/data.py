"""Synthetic datasets, IDX/CSV loaders and forget/retain/holdout splits."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng


class DataFormatError(ValueError):
    """Malformed dataset file; ``offset`` is a byte offset (IDX) or line number (CSV)."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at offset {offset})")


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    ``gaussian_halfspace``: x ~ N(0, I/d), y = sign(<h*, x>) in {-1, +1}.
    ``gaussian_mixture``: k class centers drawn in [0.2, 0.8]^d (blocky when
    ``block > 1`` and d is a square), x = center + noise * N(0, I), clipped to
    [0, 1] when ``clip`` is set so samples are valid images.
    """

    kind: str = "gaussian_mixture"
    dim: int = 256
    n_classes: int = 10
    noise: float = 0.3
    block: int = 1
    clip: bool = False
    n_train: int = 1000
    n_holdout: int = 500
    seed: int = 0
    centers_seed: int = 0
    h_star_seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


def mixture_centers(spec: SyntheticSpec) -> np.ndarray:
    rng = Rng(spec.centers_seed, (1,))
    side = int(round(np.sqrt(spec.dim)))
    if spec.block > 1 and side * side == spec.dim and side % spec.block == 0:
        low = rng.uniform(0.2, 0.8, size=(spec.n_classes, side // spec.block, side // spec.block))
        tile = np.ones((spec.block, spec.block))
        return np.stack([np.kron(c, tile).ravel() for c in low])
    return rng.uniform(0.2, 0.8, size=(spec.n_classes, spec.dim))


def gaussian_halfspace(d: int, n: int, rng: Rng, h_star: np.ndarray | None = None):
    """Draw ``n`` examples from P_{h*}; returns ``(X, y, h_star)`` with y in {-1, +1}."""
    if h_star is None:
        h_star = rng.child(0).normal(size=d)
    X = rng.child(1).normal(size=(n, d), scale=1.0 / np.sqrt(d))
    y = np.where(X @ h_star >= 0, 1, -1).astype(np.int64)
    return X, y, h_star


def generate(spec: SyntheticSpec):
    """Return ``(X_train, y_train, X_holdout, y_holdout)``."""
    rng = Rng(spec.seed)
    n = spec.n_train + spec.n_holdout
    if spec.kind == "gaussian_halfspace":
        h_star = Rng(spec.h_star_seed, (2,)).normal(size=spec.dim)
        X, y, _ = gaussian_halfspace(spec.dim, n, rng, h_star)
    elif spec.kind == "gaussian_mixture":
        centers = mixture_centers(spec)
        y = rng.child(0).integers(0, spec.n_classes, size=n)
        X = centers[y] + spec.noise * rng.child(1).normal(size=(n, spec.dim))
        if spec.clip:
            X = np.clip(X, 0.0, 1.0)
    else:
        raise ValueError(f"unknown synthetic kind {spec.kind!r}")
    return X[:spec.n_train], y[:spec.n_train], X[spec.n_train:], y[spec.n_train:]


# ---------------------------------------------------------------- splits

@dataclass
class DatasetSplit:
    X_train: np.ndarray
    y_train: np.ndarray
    X_holdout: np.ndarray
    y_holdout: np.ndarray
    forget_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.X_train = np.asarray(self.X_train, dtype=np.float64)
        self.y_train = np.asarray(self.y_train, dtype=np.int64)
        self.X_holdout = np.asarray(self.X_holdout, dtype=np.float64)
        self.y_holdout = np.asarray(self.y_holdout, dtype=np.int64)
        idx = np.asarray(self.forget_indices, dtype=np.int64)
        n = self.n_train
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError("forget index out of range")
        if np.unique(idx).size != idx.size:
            raise ValueError("forget indices must be unique")
        self.forget_indices = idx

    @property
    def n_train(self) -> int:
        return self.y_train.shape[0]

    @property
    def retain_indices(self) -> np.ndarray:
        mask = np.ones(self.n_train, dtype=bool)
        mask[self.forget_indices] = False
        return np.flatnonzero(mask)

    @property
    def forget(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X_train[self.forget_indices], self.y_train[self.forget_indices]

    @property
    def retain(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.retain_indices
        return self.X_train[r], self.y_train[r]

    @property
    def holdout(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X_holdout, self.y_holdout

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X_train, self.y_train

    def with_forget(self, forget_indices) -> "DatasetSplit":
        return DatasetSplit(self.X_train, self.y_train, self.X_holdout, self.y_holdout,
                            forget_indices)


def sample_forget_set(split: DatasetSplit | int, size: int, rng: Rng) -> np.ndarray:
    """Uniform sample of ``size`` distinct training indices, sorted."""
    n = split if isinstance(split, int) else split.n_train
    if size < 0 or size > n:
        raise ValueError(f"forget size {size} exceeds training set size {n}")
    return np.sort(rng.choice(n, size, replace=False)).astype(np.int64)


# ---------------------------------------------------------------- file loaders

_IDX_DTYPES = {0x08: (np.uint8, 1), 0x09: (np.int8, 1), 0x0B: (">i2", 2),
               0x0C: (">i4", 4), 0x0D: (">f4", 4), 0x0E: (">f8", 8)}


def read_idx(path: str | os.PathLike, expect_ndim: int | None = None) -> np.ndarray:
    """Parse an IDX file (big-endian, MNIST layout) into an array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError("truncated magic number", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"bad magic 0x{raw[:4].hex()}", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise DataFormatError(f"unknown IDX type code 0x{code:02x}", 2)
    if expect_ndim is not None and ndim != expect_ndim:
        raise DataFormatError(f"expected {expect_ndim} dimensions, magic says {ndim}", 3)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError("truncated header", len(raw))
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    dtype, width = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * width
    if len(raw) - header_end < need:
        raise DataFormatError(f"truncated payload: need {need} bytes", len(raw))
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def load_idx_images(images_path, labels_path=None):
    """Load an IDX image file (magic 0x00000803), optionally with its label file
    (magic 0x00000801). Pixels are scaled to [0, 1]; returns ``(X, y)`` with
    ``X`` shaped ``[n, rows, cols]`` and ``y`` None when no labels are given."""
    X = read_idx(images_path, expect_ndim=3).astype(np.float64) / 255.0
    y = None
    if labels_path is not None:
        y = read_idx(labels_path, expect_ndim=1).astype(np.int64)
        if y.shape[0] != X.shape[0]:
            raise DataFormatError(f"{y.shape[0]} labels for {X.shape[0]} images", 4)
    return X, y


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}
    if array.dtype not in codes:
        raise ValueError("write_idx supports uint8/int8 arrays")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, codes[array.dtype], array.ndim]))
        for d in array.shape:
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(array.tobytes())


def load_csv_dataset(path, header: bool = False, scale: float | None = None):
    """Numeric CSV with the label in the first column. ``scale`` divides features
    (use 255 for 8-bit pixels)."""
    rows, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row:
                continue
            try:
                label = float(row[0])
                feats = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DataFormatError(f"non-numeric cell: {exc}", lineno) from None
            if label != int(label):
                raise DataFormatError(f"label {row[0]!r} is not an integer", lineno)
            if rows and len(feats) != len(rows[0]):
                raise DataFormatError("ragged row", lineno)
            labels.append(int(label))
            rows.append(feats)
    X = np.asarray(rows, dtype=np.float64)
    if scale:
        X = X / scale
    return X, np.asarray(labels, dtype=np.int64)


def load_dataset(path, **kwargs):
    """Dispatch on extension: ``.csv`` or IDX (any other)."""
    path = os.fspath(path)
    if path.endswith(".csv"):
        return load_csv_dataset(path, **kwargs)
    X, y = load_idx_images(path, kwargs.get("labels_path"))
    return X.reshape(X.shape[0], -1), y

"""Datasets: the synthetic linear task, CSV tables, MNIST IDX files, splits and standardisation."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, FormatError
from .ndcore import RngStream, Tensor

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
SYNTH_STREAM = 0x5EED


@dataclass
class Normaliser:
    """Per-column affine standardisation fitted on a training split."""

    mean: Tensor
    std: Tensor

    @classmethod
    def fit(cls, a: Tensor) -> "Normaliser":
        mean = a.mean(axis=0)
        std = a.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, a: Tensor) -> Tensor:
        return (a - self.mean) / self.std

    def invert(self, a: Tensor) -> Tensor:
        return a * self.std + self.mean

    def invert_variance(self, var: Tensor) -> Tensor:
        return var * self.std**2


@dataclass
class Dataset:
    """Inputs ``x`` (N x D) and targets ``y`` (N x D_out floats, or N integer labels)."""

    x: Tensor
    y: Tensor
    feature_names: list | None = None
    target_names: list | None = None
    x_norm: Normaliser | None = None
    y_norm: Normaliser | None = None
    tag: str = "train"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} input rows but {len(self.y)} targets")
        if np.issubdtype(np.asarray(self.x).dtype, np.floating) and not np.all(np.isfinite(self.x)):
            raise DataError("inputs contain NaN or infinite values")

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx, tag: str | None = None) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx], tag=tag or self.tag)


def synth_generate(
    n: int, seed: int, x_range: tuple[float, float] = (-1.0, 1.0), noise_std: float = 1.0
) -> Dataset:
    """``n`` points of ``y = 2x + 8 + noise`` with x uniform on ``x_range``."""
    if n < 1:
        raise ArgumentError(f"n must be at least 1, got {n}")
    rng = RngStream(seed, SYNTH_STREAM)
    x_rng, noise_rng = rng.fork(), rng.fork()
    x = x_rng.uniform_range((n, 1), *x_range)
    y = 2.0 * x + 8.0 + noise_rng.gaussian((n, 1), 0.0, noise_std)
    return Dataset(x, y, ["x"], ["y"])


def _parse_cell(cell: str, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"non-numeric cell {cell!r} at row {row}, column {col!r}") from None
    if not math.isfinite(value):
        raise DataError(f"non-finite cell {cell!r} at row {row}, column {col!r}")
    return value


def load_csv(path, target_column, delimiter: str = ",") -> Dataset:
    """Read a numeric table with a header row.

    ``target_column`` is a column name, an index, or a list of either. Rows
    are numbered from 1 for the first data row (the header is row 0).
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter=delimiter))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    targets = target_column if isinstance(target_column, (list, tuple)) else [target_column]
    target_idx = []
    for t in targets:
        if isinstance(t, int):
            if not -len(header) <= t < len(header):
                raise DataError(f"{path}: target column index {t} out of range")
            target_idx.append(t % len(header))
        elif t in header:
            target_idx.append(header.index(t))
        else:
            raise DataError(f"{path}: missing target column {t!r}")
    table = []
    for r, row in enumerate(rows[1:], start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        table.append([_parse_cell(c.strip(), r, header[j]) for j, c in enumerate(row)])
    if not table:
        raise DataError(f"{path}: no data rows")
    arr = np.array(table, dtype=np.float64)
    feat_idx = [j for j in range(len(header)) if j not in target_idx]
    return Dataset(
        arr[:, feat_idx],
        arr[:, target_idx],
        [header[j] for j in feat_idx],
        [header[j] for j in target_idx],
    )


def save_csv(dataset: Dataset, path, delimiter: str = ",") -> None:
    """Write features then targets; floats use shortest round-trip repr."""
    x = np.asarray(dataset.x, dtype=np.float64)
    y = np.asarray(dataset.y, dtype=np.float64).reshape(len(dataset), -1)
    fnames = dataset.feature_names or [f"x{j}" for j in range(x.shape[1])]
    tnames = dataset.target_names or [f"y{j}" for j in range(y.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([*fnames, *tnames])
        for xr, yr in zip(x, y):
            w.writerow([repr(float(v)) for v in (*xr, *yr)])


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    try:
        raw = path.read_bytes()
        if raw[:2] == b"\x1f\x8b":
            raw = gzip.decompress(raw)
    except (OSError, EOFError) as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic number {found}, expected {magic}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = math.prod(dims)
    payload = raw[header_len:]
    if len(payload) < count:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
    if len(payload) > count:
        raise FormatError(f"{path}: {len(payload) - count} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """MNIST-style IDX pair (optionally gzip-compressed) as flattened [0, 1] images and int labels."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise FormatError(f"{labels_path}: label {labels.max()} outside 0-9")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images [N x rows x cols] and labels [N] as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_mnist(directory, subset: str = "train") -> Dataset:
    prefix = "train" if subset == "train" else "t10k"
    d = Path(directory)
    return load_idx(d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte")


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffled, disjoint, exhaustive train/val/test split.

    Row counts are the floors of ``fraction * n``; leftover rows go to the
    parts with the largest remainders, ties broken in order.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ArgumentError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    exact = [f * n for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    by_remainder = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_remainder[: n - sum(counts)]:
        counts[i] += 1
    for name, f, c in zip(("train", "val", "test"), fractions, counts):
        if f > 0 and c == 0:
            raise DataError(f"{name} split would be empty ({n} rows, fraction {f})")
    perm = RngStream(seed, 0x5B117).permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    return (
        dataset.subset(np.sort(perm[:a]), "train"),
        dataset.subset(np.sort(perm[a:b]), "val"),
        dataset.subset(np.sort(perm[b:]), "test"),
    )


def standardise(train: Dataset, *others: Dataset, targets: bool = True) -> list[Dataset]:
    """Fit feature (and optionally target) statistics on ``train`` and apply them to every split."""
    x_norm = Normaliser.fit(train.x)
    y_norm = Normaliser.fit(train.y) if targets else None
    out = []
    for ds in (train, *others):
        y = y_norm.apply(ds.y) if y_norm is not None else ds.y
        out.append(replace(ds, x=x_norm.apply(ds.x), y=y, x_norm=x_norm, y_norm=y_norm))
    return out

"""Labeled datasets, long-tailed subsampling, dev holdout, synthetic data and file I/O."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "LabeledDataset",
    "DataFormatError",
    "retained_counts",
    "literal_retained_counts",
    "make_long_tailed",
    "holdout_dev",
    "gaussian_class_means",
    "synth_gaussian_longtail",
    "synth_benchmark_splits",
    "compute_imbalance_factor",
    "ingest",
    "export",
]


class DataFormatError(ValueError):
    """A data file could not be parsed; the message names the line or byte offset."""


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.shape[0] != labels.shape[0]:
            raise ValueError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
        if labels.ndim != 1:
            raise ValueError("labels must be 1-D")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def concat(self, other: LabeledDataset) -> LabeledDataset:
        if other.num_classes != self.num_classes:
            raise ValueError("cannot concatenate datasets with different class counts")
        return LabeledDataset(
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            self.num_classes,
        )


def retained_counts(num_classes: int, base_count: int, imbalance_factor: float) -> np.ndarray:
    """Geometric profile ``round(base * (1/IF) ** (y/(K-1)))``, at least one per class."""
    if imbalance_factor < 1:
        raise ValueError(f"imbalance factor must be >= 1, got {imbalance_factor}")
    if num_classes < 1 or base_count < 1:
        raise ValueError("num_classes and base_count must be positive")
    if num_classes == 1:
        return np.array([base_count])
    y = np.arange(num_classes)
    r = np.rint(base_count * (1.0 / imbalance_factor) ** (y / (num_classes - 1))).astype(np.int64)
    if r.min() < 1:
        raise ValueError(f"imbalance factor {imbalance_factor} leaves a class with no examples (base {base_count})")
    return r


def literal_retained_counts(num_classes: int, base_count: int, mu: float) -> np.ndarray:
    """``base - round(base * mu**y)`` for classes indexed ``y = 1..K``.

    Provided for comparison only; it does not reproduce the usual CIFAR-LT totals.
    """
    if not 0 < mu < 1:
        raise ValueError("mu must lie in (0, 1)")
    y = np.arange(1, num_classes + 1)
    r = base_count - np.rint(base_count * mu ** y).astype(np.int64)
    if r.min() < 1:
        raise ValueError("literal profile leaves a class with no examples")
    return r


def _split_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def make_long_tailed(ds: LabeledDataset, imbalance_factor: float, seed, counts=None) -> LabeledDataset:
    """Subsample each class uniformly at random down to the geometric profile.

    ``ds`` must be balanced. Class 0 is the head. ``counts`` overrides the
    profile (e.g. :func:`literal_retained_counts`).
    """
    if imbalance_factor < 1:
        raise ValueError(f"imbalance factor must be >= 1, got {imbalance_factor}")
    if counts is None and imbalance_factor == 1:
        return ds
    base = ds.class_counts
    if base.min() != base.max():
        raise ValueError(f"make_long_tailed expects a balanced dataset, got counts {base.tolist()}")
    if counts is None:
        counts = retained_counts(ds.num_classes, int(base[0]), imbalance_factor)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.min() < 1 or np.any(counts > base):
        raise ValueError(f"infeasible retained counts {counts.tolist()}")
    rng = _split_rng(seed)
    keep = []
    for y in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == y)
        keep.append(np.sort(rng.choice(members, size=counts[y], replace=False)))
    return ds.subset(np.sort(np.concatenate(keep)))


def holdout_dev(ds: LabeledDataset, per_class: int, seed) -> tuple[LabeledDataset, LabeledDataset]:
    """Split off a balanced development set with ``per_class`` examples of each class."""
    if per_class < 1:
        raise ValueError("per_class must be positive")
    counts = ds.class_counts
    small = np.flatnonzero(counts <= per_class)
    if small.size:
        raise ValueError(
            f"classes {small.tolist()} have <= {per_class} examples; cannot hold out a development set"
        )
    rng = _split_rng(seed)
    dev = []
    for y in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == y)
        dev.append(rng.choice(members, size=per_class, replace=False))
    dev_idx = np.sort(np.concatenate(dev))
    mask = np.ones(len(ds), dtype=bool)
    mask[dev_idx] = False
    return ds.subset(np.flatnonzero(mask)), ds.subset(dev_idx)


def gaussian_class_means(num_classes: int, dims: int, class_separation: float, seed) -> np.ndarray:
    """Class means with pairwise distance ``class_separation``.

    For ``K <= dims`` the means are scaled rows of a random orthogonal matrix,
    so the distances are exact; otherwise they are random unit directions and
    the distances hold approximately.
    """
    if num_classes < 2 or dims < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    rng = np.random.default_rng(seed)
    radius = class_separation / np.sqrt(2.0)
    if num_classes <= dims:
        q, r = np.linalg.qr(rng.standard_normal((dims, dims)))
        q = q * np.sign(np.diag(r))
        return radius * q[:num_classes]
    dirs = rng.standard_normal((num_classes, dims))
    return radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _sample_classes(means: np.ndarray, counts, rng: np.random.Generator) -> LabeledDataset:
    labels = np.repeat(np.arange(means.shape[0]), counts)
    x = means[labels] + rng.standard_normal((labels.size, means.shape[1]))
    return LabeledDataset(x, labels, means.shape[0])


def synth_gaussian_longtail(
    num_classes: int,
    dims: int,
    imbalance_factor: float,
    base_count: int,
    class_separation: float,
    seed,
) -> LabeledDataset:
    """Unit-variance Gaussian classes whose sizes follow the geometric long-tail profile."""
    counts = retained_counts(num_classes, base_count, imbalance_factor)
    means = gaussian_class_means(num_classes, dims, class_separation, seed)
    rng = np.random.default_rng([int(seed), 1])
    return _sample_classes(means, counts, rng)


def synth_benchmark_splits(
    num_classes: int,
    dims: int,
    imbalance_factor: float,
    base_count: int,
    class_separation: float,
    dev_per_class: int,
    test_per_class: int,
    seed,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Training set T (long-tailed), balanced dev set D and balanced test set.

    Each class is drawn with ``dev_per_class`` extra examples which are then
    held out, so T keeps the exact profile even when the tail is smaller
    than the dev quota.
    """
    counts = retained_counts(num_classes, base_count, imbalance_factor)
    means = gaussian_class_means(num_classes, dims, class_separation, seed)
    full = _sample_classes(means, counts + dev_per_class, np.random.default_rng([int(seed), 1]))
    train, dev = holdout_dev(full, dev_per_class, [int(seed), 2])
    test = _sample_classes(means, np.full(num_classes, test_per_class), np.random.default_rng([int(seed), 3]))
    return train, dev, test


def compute_imbalance_factor(ds_or_counts) -> float:
    """Largest class size divided by smallest (non-empty) class size."""
    counts = ds_or_counts.class_counts if isinstance(ds_or_counts, LabeledDataset) else np.asarray(ds_or_counts)
    counts = counts[counts > 0]
    if counts.size == 0:
        raise ValueError("no non-empty classes")
    return float(counts.max() / counts.min())


# ----------------------------------------------------------------------------- I/O

_CIFAR_RECORD = 1 + 3072
_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _ingest_csv(path: Path, num_classes: int | None) -> LabeledDataset:
    labels, rows = [], []
    width = None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                label = int(row[0])
                values = [float(c) for c in row[1:]]
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} features, found {len(values)}")
            if label < 0:
                raise DataFormatError(f"{path}:{lineno}: negative label {label}")
            if not all(np.isfinite(values)):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
            labels.append(label)
            rows.append(values)
    if not labels:
        raise DataFormatError(f"{path}: empty csv (no data rows)")
    k = num_classes if num_classes is not None else max(labels) + 1
    return LabeledDataset(np.array(rows, dtype=np.float64), np.array(labels), k)


def _ingest_cifar(path: Path, num_classes: int | None, as_images: bool) -> LabeledDataset:
    raw = path.read_bytes()
    if not raw:
        raise DataFormatError(f"{path}: empty cifar_binary file")
    if len(raw) % _CIFAR_RECORD:
        bad = (len(raw) // _CIFAR_RECORD) * _CIFAR_RECORD
        raise DataFormatError(f"{path}: truncated record at byte offset {bad} ({len(raw)} bytes total)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    pixels = arr[:, 1:].astype(np.float64) / 255.0
    if as_images:
        pixels = pixels.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(pixels, labels, k)


def _read_idx(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: idx header truncated at byte offset {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: bad idx magic at byte offset 0")
    if raw[2] not in _IDX_DTYPES:
        raise DataFormatError(f"{path}: unknown idx dtype code {raw[2]:#x} at byte offset 2")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: idx dimension table truncated at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header_end != expected:
        raise DataFormatError(
            f"{path}: expected {expected} data bytes from byte offset {header_end}, found {len(raw) - header_end}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def _idx_labels_path(path: Path) -> Path:
    name = path.name
    for a, b in (("images-idx3", "labels-idx1"), ("images", "labels")):
        if a in name:
            return path.with_name(name.replace(a, b))
    raise DataFormatError(f"{path}: cannot derive idx labels file name; pass labels_path")


def _ingest_idx(path: Path, labels_path: Path | None, num_classes: int | None, scale: float) -> LabeledDataset:
    images = _read_idx(path).astype(np.float64)
    labels = _read_idx(labels_path or _idx_labels_path(path)).astype(np.int64)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DataFormatError(f"{path}: {images.shape[0]} images but label array has shape {labels.shape}")
    features = images / scale
    if features.ndim == 3:
        features = features[..., None]
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(features, labels, k)


def ingest(path, format: str, num_classes: int | None = None, *, as_images: bool = False, labels_path=None) -> LabeledDataset:
    """Load a dataset from ``csv``, ``cifar_binary`` or ``idx_images``.

    csv rows are ``label, x_1, ..., x_d`` without a header. cifar_binary records
    are one label byte plus 3072 pixel bytes, scaled to [0, 1]. idx_images reads
    an image file plus its labels file (derived from the name unless given);
    uint8 images are scaled to [0, 1].
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "csv":
        return _ingest_csv(path, num_classes)
    if format == "cifar_binary":
        return _ingest_cifar(path, num_classes, as_images)
    if format == "idx_images":
        raw_dtype = path.read_bytes()[2:3]
        scale = 255.0 if raw_dtype == b"\x08" else 1.0
        return _ingest_idx(path, Path(labels_path) if labels_path else None, num_classes, scale)
    raise ValueError(f"unknown format {format!r}")


def _write_idx(path: Path, arr: np.ndarray, code: int) -> None:
    dtype = np.dtype(_IDX_DTYPES[code])
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path.write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def export(ds: LabeledDataset, path, format: str, *, labels_path=None) -> None:
    """Write ``ds`` in one of the :func:`ingest` formats.

    csv uses ``repr`` floats so values round-trip exactly. cifar_binary and
    idx_images quantize features in [0, 1] to bytes.
    """
    path = Path(path)
    if format == "csv":
        flat = ds.features.reshape(len(ds), -1)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            for label, row in zip(ds.labels, flat):
                writer.writerow([int(label), *(repr(float(v)) for v in row)])
    elif format == "cifar_binary":
        x = ds.features
        if x.ndim == 4:
            x = x.transpose(0, 3, 1, 2)
        x = x.reshape(len(ds), -1)
        if x.shape[1] != 3072:
            raise ValueError(f"cifar_binary needs 3072 features per example, got {x.shape[1]}")
        if ds.num_classes > 256:
            raise ValueError("cifar_binary labels are single bytes")
        pixels = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
        out = np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1)
        path.write_bytes(out.tobytes())
    elif format == "idx_images":
        x = ds.features[..., 0] if ds.features.ndim == 4 and ds.features.shape[-1] == 1 else ds.features
        _write_idx(path, np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8), 0x08)
        _write_idx(Path(labels_path) if labels_path else _idx_labels_path(path), ds.labels.astype(np.uint8), 0x08)
    else:
        raise ValueError(f"unknown format {format!r}")

"""Dataset ingestion (IDX, CSV), synthetic blobs, non-IID partitioning, batching."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    """Base class for IDX parse failures."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """A labelled dataset: (n, q) float features and n integer labels in [0, L)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ValueError("labels must be 1-D with one entry per feature row")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain NaN or Inf")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        feats.setflags(write=False)
        labels.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class Partition:
    """Assignment of every training instance to one of m worker devices."""

    assignment: np.ndarray
    num_devices: int

    def __post_init__(self):
        arr = np.asarray(self.assignment, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("assignment must be 1-D")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_devices):
            raise ValueError("device index out of range")
        object.__setattr__(self, "assignment", arr)
        arr.setflags(write=False)

    def shard(self, device: int) -> np.ndarray:
        """Instance indices owned by one device."""
        return np.flatnonzero(self.assignment == device)

    def shards(self) -> list[np.ndarray]:
        return [self.shard(i) for i in range(self.num_devices)]


def _read_be_u32(buf: bytes, offset: int, path: Path) -> int:
    if offset + 4 > len(buf):
        raise TruncatedPayloadError(f"{path}: truncated header")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (MNIST layout) as a Dataset.

    Pixels are scaled to [0, 1] and images flattened row-major, so an
    n x r x c image file yields n rows of r*c features.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_buf = images_path.read_bytes()
    magic = _read_be_u32(img_buf, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagicError(f"{images_path}: bad image magic 0x{magic:08x}")
    n = _read_be_u32(img_buf, 4, images_path)
    rows = _read_be_u32(img_buf, 8, images_path)
    cols = _read_be_u32(img_buf, 12, images_path)
    payload = img_buf[16:]
    if len(payload) < n * rows * cols:
        raise TruncatedPayloadError(f"{images_path}: expected {n * rows * cols} pixel bytes, found {len(payload)}")

    lbl_buf = labels_path.read_bytes()
    magic = _read_be_u32(lbl_buf, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise BadMagicError(f"{labels_path}: bad label magic 0x{magic:08x}")
    n_labels = _read_be_u32(lbl_buf, 4, labels_path)
    lbl_payload = lbl_buf[8:]
    if len(lbl_payload) < n_labels:
        raise TruncatedPayloadError(f"{labels_path}: expected {n_labels} label bytes, found {len(lbl_payload)}")
    if n_labels != n:
        raise CountMismatchError(f"{n} images but {n_labels} labels")

    pixels = np.frombuffer(payload[: n * rows * cols], dtype=np.uint8)
    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_payload[:n], dtype=np.uint8).astype(np.int64)
    num_classes = max(2, int(labels.max()) + 1) if n else 2
    return Dataset(features, labels, num_classes)


def _scale_min_max(features: np.ndarray) -> np.ndarray:
    """Per-column min-max scaling to [0, 1]; constant columns map to zero."""
    lo = features.min(axis=0)
    hi = features.max(axis=0)
    span = hi - lo
    scaled = np.zeros_like(features)
    nonconst = span > 0
    scaled[:, nonconst] = (features[:, nonconst] - lo[nonconst]) / span[nonconst]
    return scaled


def load_csv(path, label_column: str, num_classes: int) -> Dataset:
    """Load a numeric CSV with a header row as a Dataset.

    Features are min-max scaled per column to [0, 1].  Labels that parse as
    integers already in [0, num_classes) are kept verbatim; otherwise the
    distinct raw values are sorted and mapped to 0..L-1 (e.g. B/M -> 0/1).
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if label_column not in header:
            raise CsvFormatError(f"{path}: no column named {label_column!r}")
        label_idx = header.index(label_column)
        feature_cols = [i for i in range(len(header)) if i != label_idx]
        rows, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvFormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in feature_cols])
            except ValueError:
                raise CsvFormatError(f"{path}:{lineno}: non-numeric feature cell") from None
            raw_labels.append(row[label_idx].strip())
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")

    features = _scale_min_max(np.asarray(rows, dtype=np.float64))
    labels = _map_labels(raw_labels, num_classes, path)
    return Dataset(features, labels, num_classes)


def _map_labels(raw_labels: list[str], num_classes: int, path: Path) -> np.ndarray:
    try:
        ints = [int(v) for v in raw_labels]
    except ValueError:
        ints = None
    if ints is not None:
        arr = np.asarray(ints, dtype=np.int64)
        if arr.min() < 0 or arr.max() >= num_classes:
            raise CsvFormatError(f"{path}: integer label outside [0, {num_classes})")
        return arr
    values = sorted(set(raw_labels))
    if len(values) > num_classes:
        raise CsvFormatError(f"{path}: {len(values)} distinct label values but only {num_classes} classes")
    mapping = {v: i for i, v in enumerate(values)}
    return np.asarray([mapping[v] for v in raw_labels], dtype=np.int64)


def save_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    """Write a Dataset to CSV with full-precision floats (round-trips with load_csv)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dataset.num_features)] + [label_column])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def blob_means(num_classes: int, num_features: int) -> np.ndarray:
    """Deterministic distinct cluster centers used by synth_blobs."""
    means = np.zeros((num_classes, num_features))
    for l in range(num_classes):
        means[l, l % num_features] = 1.0 + l // num_features
    return means


def synth_blobs(
    num_classes: int,
    per_class: int,
    num_features: int,
    spread: float,
    rng: np.random.Generator,
) -> Dataset:
    """Gaussian clusters with distinct means, one per class.

    Small ``spread`` gives a linearly separable toy problem; class l is
    centred on ``blob_means(...)[l]``.
    """
    if num_classes < 2 or num_features < 1 or per_class < 1:
        raise ValueError("need num_classes >= 2, per_class >= 1, num_features >= 1")
    means = blob_means(num_classes, num_features)
    features = np.empty((num_classes * per_class, num_features))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for l in range(num_classes):
        block = slice(l * per_class, (l + 1) * per_class)
        features[block] = means[l] + spread * rng.standard_normal((per_class, num_features))
        labels[block] = l
    return Dataset(features, labels, num_classes)


def partition_noniid(
    dataset: Dataset,
    num_devices: int,
    label_bias: float,
    rng: np.random.Generator,
) -> Partition:
    """Assign instances to devices with label-group affinity ``label_bias``.

    Devices are split into L equal contiguous groups.  An instance with
    label l lands in group l with probability ``label_bias`` and otherwise
    uniformly in one of the other L-1 groups; within the chosen group the
    device is uniform.  ``label_bias = 1/L`` is the IID case.
    """
    L = dataset.num_classes
    if num_devices % L != 0:
        raise ValueError(f"device count {num_devices} must be divisible by the {L} classes")
    if not 0 < label_bias <= 1:
        raise ValueError("label bias must be in (0, 1]")
    group_size = num_devices // L
    n = len(dataset)
    stay = rng.random(n) < label_bias
    # A rotation by 1..L-1 is uniform over the L-1 non-home groups.
    offsets = rng.integers(1, L, size=n)
    groups = np.where(stay, dataset.labels, (dataset.labels + offsets) % L)
    within = rng.integers(0, group_size, size=n)
    return Partition(groups * group_size + within, num_devices)


def sample_batch(shard_size: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without-replacement sample of min(batch_size, shard_size) indices."""
    if shard_size < 1:
        raise ValueError("device shard is empty")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    take = min(batch_size, shard_size)
    return rng.choice(shard_size, size=take, replace=False)

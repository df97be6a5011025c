"""Desk-scale data: synthetic multi-cluster classes, IDX images, task streams."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class IdxFormatError(DatasetError):
    pass


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    class_names: list[str] | None = None
    # position of each row in the dataset it was cut from
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2:
            raise DatasetError(f"samples must be a matrix, got shape {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise DatasetError(f"{self.samples.shape[0]} samples but labels of shape {self.labels.shape}")
        if self.split not in ("train", "test"):
            raise DatasetError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.samples)):
            raise DatasetError("samples contain non-finite values")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, rows: np.ndarray) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.intp)
        return LabeledDataset(
            self.samples[rows],
            self.labels[rows],
            self.num_classes,
            self.split,
            self.class_names,
            self.indices[rows],
        )


class TrainTest(NamedTuple):
    train: LabeledDataset
    test: LabeledDataset


# -- synthetic ---------------------------------------------------------------


def gen_synthetic_manifolds(
    seed: int,
    num_classes: int,
    clusters_per_class: int,
    dim: int,
    samples_per_class: int,
    cluster_spread: float = 1.0,
    cluster_separation: float = 4.0,
) -> TrainTest:
    """Each class is a mixture of isotropic Gaussian blobs.

    Blob centres are uniform on the sphere of radius ``cluster_separation``;
    each class is split 80/20 into train/test.
    """
    if min(num_classes, clusters_per_class, samples_per_class) < 1:
        raise DatasetError("all counts must be >= 1")
    if dim < 2:
        raise DatasetError(f"dim must be >= 2, got {dim}")
    if samples_per_class < clusters_per_class:
        raise DatasetError(
            f"samples_per_class ({samples_per_class}) < clusters_per_class ({clusters_per_class})"
        )
    if samples_per_class < 2:
        raise DatasetError("need at least 2 samples per class for a train/test split")
    if not (cluster_spread > 0 and cluster_separation > 0):
        raise DatasetError("cluster_spread and cluster_separation must be positive")

    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(0.2 * samples_per_class)))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(num_classes):
        centers = rng.standard_normal((clusters_per_class, dim))
        centers *= cluster_separation / np.linalg.norm(centers, axis=1, keepdims=True)
        sizes = np.full(clusters_per_class, samples_per_class // clusters_per_class)
        sizes[: samples_per_class % clusters_per_class] += 1
        pts = np.concatenate(
            [ctr + cluster_spread * rng.standard_normal((k, dim)) for ctr, k in zip(centers, sizes)]
        )
        order = rng.permutation(samples_per_class)
        te_x.append(pts[order[:n_test]])
        tr_x.append(pts[order[n_test:]])
        te_y.append(np.full(n_test, c))
        tr_y.append(np.full(samples_per_class - n_test, c))
    train = LabeledDataset(np.concatenate(tr_x), np.concatenate(tr_y), num_classes, "train")
    test = LabeledDataset(np.concatenate(te_x), np.concatenate(te_y), num_classes, "test")
    return TrainTest(train, test)


# -- IDX ---------------------------------------------------------------------


def _read_bytes(path: str | os.PathLike) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated file ({len(raw)} bytes, no magic number)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: wrong magic number, expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} of {header} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < n:
        raise IdxFormatError(f"{path}: truncated payload, expected {n} bytes, found {len(raw) - header}")
    if len(raw) - header > n:
        raise IdxFormatError(f"{path}: {len(raw) - header - n} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(
    images_path: str | os.PathLike,
    labels_path: str | os.PathLike,
    split: str = "train",
    num_classes: int | None = None,
) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzip-compressed).

    Pixels are scaled to [0, 1] and mapped affinely to [-1, 1]; images are
    flattened row-major.
    """
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0 * 2.0 - 1.0
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 0
    return LabeledDataset(x, y, num_classes, split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray, compress: bool = False) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"bad shapes for IDX: images {images.shape}, labels {labels.shape}")
    img = struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()
    for path, payload in ((images_path, img), (labels_path, lab)):
        with open(path, "wb") as fh:
            # mtime=0 keeps compressed output byte-reproducible
            fh.write(gzip.compress(payload, mtime=0) if compress else payload)


# -- textual table -------------------------------------------------------------

TABLE_TAG = "#table"


def write_table(path, labels: np.ndarray, rows: np.ndarray, num_classes: int) -> None:
    """Header ``#table dim=<d> num_classes=<C> rows=<n>``, then ``label v1 ... vd`` per line.

    Values are written with ``repr`` so they re-load bit-exactly.
    """
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if rows.ndim != 2 or labels.shape != (rows.shape[0],):
        raise DatasetError(f"table rows {rows.shape} do not match labels {labels.shape}")
    lines = [f"{TABLE_TAG} dim={rows.shape[1]} num_classes={num_classes} rows={rows.shape[0]}"]
    for lab, vec in zip(labels, rows):
        lines.append(" ".join([str(int(lab))] + [repr(float(v)) for v in vec]))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write table to {path}: {exc}") from exc


def read_table(path) -> tuple[np.ndarray, np.ndarray, int]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if not header or header[0] != TABLE_TAG:
            raise DatasetError(f"{path}: missing '{TABLE_TAG}' header")
        fields = dict(tok.split("=", 1) for tok in header[1:])
        dim, num_classes, n = int(fields["dim"]), int(fields["num_classes"]), int(fields["rows"])
        labels = np.empty(n, dtype=np.int64)
        rows = np.empty((n, dim))
        count = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != dim + 1:
                raise DatasetError(f"{path}:{lineno}: expected {dim + 1} fields, found {len(parts)}")
            if count >= n:
                raise DatasetError(f"{path}: more rows than the header's {n}")
            labels[count] = int(parts[0])
            rows[count] = [float(v) for v in parts[1:]]
            count += 1
    if count != n:
        raise DatasetError(f"{path}: header promises {n} rows, found {count}")
    return labels, rows, num_classes


def save_dataset_table(path, dataset: LabeledDataset) -> None:
    write_table(path, dataset.labels, dataset.samples, dataset.num_classes)


def load_dataset_table(path, split: str = "train") -> LabeledDataset:
    labels, rows, num_classes = read_table(path)
    return LabeledDataset(rows, labels, num_classes, split)


# -- protocols and task streams --------------------------------------------------


@dataclass(frozen=True)
class FixedTotal:
    budget: int


@dataclass(frozen=True)
class PerClass:
    count: int


@dataclass
class TaskProtocol:
    base_classes: int
    increment: int
    class_order: Sequence[int] | None = None
    memory_policy: FixedTotal | PerClass = field(default_factory=lambda: PerClass(20))

    def phase_sizes(self, num_classes: int) -> list[int]:
        b, k = self.base_classes, self.increment
        if b < 0 or k < 1:
            raise DatasetError(f"need base >= 0 and increment >= 1, got base={b}, increment={k}")
        rest = num_classes - b
        if rest <= 0 and b != num_classes:
            raise DatasetError(f"base {b} exceeds {num_classes} classes")
        if rest % k:
            raise DatasetError(f"{num_classes} classes cannot be split as base {b} + m * {k}")
        m = rest // k
        if b == 0:
            if m < 1:
                raise DatasetError("protocol leaves no tasks")
            return [k] * m
        if m < 1:
            raise DatasetError(f"base {b} + increment {k} needs at least one incremental task")
        return [b] + [k] * m


@dataclass
class Task:
    classes: np.ndarray
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class TaskStream:
    tasks: list[Task]
    class_order: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.tasks)

    def cumulative_test(self, phase: int) -> LabeledDataset:
        """Union of the test subsets of tasks 1..phase (1-based)."""
        if not 1 <= phase <= len(self.tasks):
            raise IndexError(f"phase {phase} outside 1..{len(self.tasks)}")
        parts = [t.test for t in self.tasks[:phase]]
        return LabeledDataset(
            np.concatenate([p.samples for p in parts]),
            np.concatenate([p.labels for p in parts]),
            self.num_classes,
            "test",
            None,
            np.concatenate([p.indices for p in parts]),
        )

    def classes_seen(self, phase: int) -> int:
        return int(sum(len(t.classes) for t in self.tasks[:phase]))


def split_tasks(train: LabeledDataset, test: LabeledDataset, protocol: TaskProtocol, seed: int) -> TaskStream:
    """Cut a train/test pair into class-disjoint tasks.

    Labels are remapped so that the j-th class of ``class_order`` becomes
    label j; the classifier grows in that order.
    """
    num_classes = train.num_classes
    if test.num_classes != num_classes:
        raise DatasetError("train and test disagree on the number of classes")
    sizes = protocol.phase_sizes(num_classes)
    if protocol.class_order is None:
        order = np.random.default_rng(seed).permutation(num_classes)
    else:
        order = np.asarray(protocol.class_order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(num_classes)):
            raise DatasetError("class_order must be a permutation of all class ids")
    remap = np.empty(num_classes, dtype=np.int64)
    remap[order] = np.arange(num_classes)
    for ds in (train, test):
        present = np.unique(ds.labels)
        if len(present) != num_classes:
            raise DatasetError(f"{ds.split} split is missing classes {sorted(set(range(num_classes)) - set(present.tolist()))}")

    def relabel(ds: LabeledDataset) -> LabeledDataset:
        return LabeledDataset(ds.samples, remap[ds.labels], num_classes, ds.split, None, ds.indices)

    train_r, test_r = relabel(train), relabel(test)
    tasks = []
    start = 0
    for size in sizes:
        cls = np.arange(start, start + size)
        tasks.append(
            Task(
                cls,
                train_r.subset(np.flatnonzero(np.isin(train_r.labels, cls))),
                test_r.subset(np.flatnonzero(np.isin(test_r.labels, cls))),
            )
        )
        start += size
    return TaskStream(tasks, order, num_classes)

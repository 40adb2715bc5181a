"""Datasets and task construction.

Generators are pure functions of their seed and parameters. MNIST comes in
through the standard IDX encoding (optionally gzipped).
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ShapeError

CLASSIFICATION = "softmax-classification"
EMBEDDING = "l2-embedding"
LOSSES = (CLASSIFICATION, EMBEDDING)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """``inputs`` is (n, d). ``labels`` is an int vector (classification), an
    (n, k) target matrix (regression) or None (unlabeled)."""

    inputs: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape[0] != self.inputs.shape[0]:
                raise ShapeError(
                    f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} inputs"
                )
            if self.labels.ndim == 1:
                self.labels = self.labels.astype(np.int64)
                if self.labels.size and self.labels.min() < 0:
                    raise ValueError("class labels must be nonnegative")
            else:
                self.labels = self.labels.astype(np.float64)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.labels is not None and self.labels.ndim == 1

    def take(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.inputs[idx], labels, self.name if name is None else name)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.inputs, None, self.name)

    def concat(self, other: "Dataset", name: str | None = None) -> "Dataset":
        if (self.labels is None) != (other.labels is None):
            raise ShapeError("cannot concatenate labeled with unlabeled data")
        labels = None if self.labels is None else np.concatenate([self.labels, other.labels])
        return Dataset(np.vstack([self.inputs, other.inputs]), labels,
                       name if name is not None else f"{self.name}+{other.name}")


@dataclass
class TaskSpec:
    train: Dataset
    eval: Dataset
    loss: str = CLASSIFICATION
    head: str | None = None
    n_classes: int | None = None
    importance_set: Dataset | None = None
    name: str = ""

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.train.dim != self.eval.dim:
            raise ShapeError(f"train dim {self.train.dim} != eval dim {self.eval.dim}")
        if self.loss == CLASSIFICATION:
            if self.n_classes is None:
                raise ValueError("classification tasks must declare n_classes")
            for ds in (self.train, self.eval):
                if ds.labels is not None and ds.labels.size and ds.labels.max() >= self.n_classes:
                    raise ValueError(f"labels in {ds.name!r} exceed n_classes={self.n_classes}")

    @property
    def output_dim(self) -> int:
        if self.loss == CLASSIFICATION:
            return self.n_classes
        return self.train.labels.shape[1]


@dataclass(frozen=True)
class Permutation:
    mapping: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ValueError("mapping is not a bijection over 0..n-1")
        object.__setattr__(self, "mapping", m)

    @classmethod
    def identity(cls, size: int) -> "Permutation":
        return cls(np.arange(size), None)

    @classmethod
    def random(cls, size: int, seed: int) -> "Permutation":
        return cls(np.random.default_rng(seed).permutation(size), seed)

    @property
    def size(self) -> int:
        return self.mapping.size

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.size)
        return Permutation(inv, self.seed)


# -- IDX ----------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, magic: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    if len(buf) < 4:
        raise ParseError(f"{what}: file too short for magic number ({len(buf)} bytes)", 0)
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise ParseError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"{what}: truncated header, expected {header} bytes, got {len(buf)}", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = header + int(np.prod(dims))
    if len(buf) != expected:
        raise ParseError(
            f"{what}: expected {expected} bytes for dims {dims}, got {len(buf)}",
            min(len(buf), expected),
        )
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=header)


def read_idx_images(path) -> np.ndarray:
    dims, data = _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, str(path))
    return data.reshape(dims)


def read_idx_labels(path) -> np.ndarray:
    dims, data = _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC, str(path))
    return data.reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Images flattened to rows and scaled to [0, 1]; labels as int64."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels", 4
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), name)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3:
        raise ShapeError("IDX images must be (n, rows, cols)")
    if images.min() < 0 or images.max() > 255:
        raise ValueError("IDX pixel values must be in 0..255")
    _write(path, struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    _write(path, struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes())


def _write(path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # no name or mtime in the header, so equal payloads give equal bytes
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(data_dir, split: str) -> tuple[Path, Path] | None:
    """Locate an IDX image/label pair for ``split`` (plain or ``.gz``)."""
    data_dir = Path(data_dir)
    out = []
    for stem in MNIST_FILES[split]:
        for cand in (data_dir / stem, data_dir / f"{stem}.gz"):
            if cand.exists():
                out.append(cand)
                break
        else:
            return None
    return out[0], out[1]


# -- task builders --------------------------------------------------------------

def permuted_task(base: Dataset, perm: Permutation) -> Dataset:
    """Output pixel ``i`` takes input pixel ``perm.mapping[i]``; labels unchanged."""
    if perm.size != base.dim:
        raise ShapeError(f"permutation over {perm.size} indices, data has {base.dim} columns")
    return Dataset(base.inputs[:, perm.mapping], base.labels, base.name)


def stratified_indices(labels: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` indices with class proportions matching ``labels`` (sorted)."""
    classes, counts = np.unique(labels, return_counts=True)
    quota = np.floor(counts / counts.sum() * n).astype(int)
    # hand out the remainder to the largest fractional parts, ties by class order
    rem = n - quota.sum()
    frac = counts / counts.sum() * n - quota
    quota[np.argsort(-frac, kind="stable")[:rem]] += 1
    picks = [rng.permutation(np.flatnonzero(labels == c))[:q] for c, q in zip(classes, quota)]
    return np.sort(np.concatenate(picks))


def stratified_split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    n_train = int(round(len(ds) * train_fraction))
    tr = stratified_indices(ds.labels, n_train, rng)
    ev = np.setdiff1d(np.arange(len(ds)), tr)
    return ds.take(tr, f"{ds.name}/train"), ds.take(ev, f"{ds.name}/eval")


def permuted_sequence(train: Dataset, eval_: Dataset, n_tasks: int, seed: int,
                      n_classes: int, identity_first: bool = True, name: str = "perm",
                      multi_head: bool = False) -> list[TaskSpec]:
    """One task per permutation.

    By default all tasks share one output layer (every parameter is shared);
    ``multi_head`` gives task ``i`` its own head ``t{i}`` instead.
    """
    tasks = []
    for i in range(n_tasks):
        if i == 0 and identity_first:
            perm = Permutation.identity(train.dim)
        else:
            perm = Permutation.random(train.dim, seed * 1000 + i)
        tasks.append(TaskSpec(
            permuted_task(train, perm), permuted_task(eval_, perm), CLASSIFICATION,
            head=f"t{i}" if multi_head else None, n_classes=n_classes, name=f"{name}-{i}",
        ))
    return tasks


def mnist_desk_tasks(data_dir, n_tasks: int = 5, seed: int = 0, n_train: int = 5000,
                     n_eval: int = 1000, full: bool = False, identity_first: bool = True,
                     multi_head: bool = False) -> list[TaskSpec]:
    """Permuted-MNIST sequence from IDX files in ``data_dir``.

    Uses a seeded class-stratified subsample of ``n_train`` training images
    (all of them when ``full``). Evaluation draws from the t10k files when
    present, otherwise from a disjoint stratified hold-out of the train pool.
    """
    found = find_mnist(data_dir, "train")
    if found is None:
        raise FileNotFoundError(f"no MNIST train IDX files under {data_dir}")
    pool = load_idx(*found, name="mnist")
    rng = np.random.default_rng(seed)
    test = find_mnist(data_dir, "test")
    if test is not None:
        test_ds = load_idx(*test, name="mnist-test")
        train = pool if full else pool.take(stratified_indices(pool.labels, min(n_train, len(pool)), rng))
        eval_ = test_ds if full else test_ds.take(stratified_indices(test_ds.labels, min(n_eval, len(test_ds)), rng))
    else:
        if full or n_train + n_eval > len(pool):
            n_eval = min(n_eval, len(pool) // 5)
            n_train = len(pool) - n_eval
        ev_idx = stratified_indices(pool.labels, n_eval, rng)
        rest = np.setdiff1d(np.arange(len(pool)), ev_idx)
        tr_idx = rest[stratified_indices(pool.labels[rest], n_train, rng)]
        train, eval_ = pool.take(tr_idx), pool.take(ev_idx)
    n_classes = int(max(train.labels.max(), eval_.labels.max())) + 1
    return permuted_sequence(train, eval_, n_tasks, seed, n_classes, identity_first, "pmnist", multi_head)


def synth_classification(seed: int, classes: int, dim: int, per_class: int, spread: float,
                         noise: float = 1.0, head: str | None = "t0", name: str = "synth",
                         split_support: bool = False) -> TaskSpec:
    """Gaussian blobs around seeded unit-sphere means scaled by ``spread``; 80/20 split.

    With ``split_support`` the first ``classes // 2`` classes live (means and
    noise) on the first ``dim // 2`` coordinates and the rest on the remaining
    ones, so the two class groups excite disjoint input weights.
    """
    if classes < 2 or per_class < 1:
        raise ValueError("need classes >= 2 and per_class >= 1")
    if split_support and dim < 2:
        raise ValueError("split_support needs dim >= 2")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, dim))
    if split_support:
        first = np.arange(classes) < classes // 2
        means[first, dim // 2:] = 0.0
        means[~first, :dim // 2] = 0.0
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= spread
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + noise * rng.normal(size=(labels.size, dim))
    if split_support:
        x *= (means[labels] != 0)
    ds = Dataset(x, labels, name)
    n_train = int(round(0.8 * per_class))
    if n_train in (0, per_class):
        tr_idx = np.arange(len(ds))
        ev_idx = tr_idx
    else:
        order = np.concatenate([c * per_class + rng.permutation(per_class) for c in range(classes)])
        blocks = order.reshape(classes, per_class)
        tr_idx = np.sort(blocks[:, :n_train].ravel())
        ev_idx = np.sort(blocks[:, n_train:].ravel())
    return TaskSpec(ds.take(tr_idx, f"{name}/train"), ds.take(ev_idx, f"{name}/eval"),
                    CLASSIFICATION, head=head, n_classes=classes, name=name)


def synth_embedding(seed: int, dim_in: int, dim_out: int, n: int, noise: float = 0.0,
                    name: str = "embed", shift: float = 0.0) -> TaskSpec:
    """Regression onto a fixed seeded linear map of the inputs (plus bounded noise).

    Headless: the whole network is shared and its output is the embedding.
    ``shift`` moves the input cloud by that distance along a seeded unit
    direction, so tasks with different maps can occupy different input regions.
    """
    if dim_in < 1 or dim_out < 1 or n < 2:
        raise ValueError("need dim_in, dim_out >= 1 and n >= 2")
    rng = np.random.default_rng(seed)
    a = rng.normal(scale=1.0 / np.sqrt(dim_in), size=(dim_out, dim_in))
    x = rng.normal(size=(n, dim_in))
    if shift:
        u = rng.normal(size=dim_in)
        x = x + shift * u / np.linalg.norm(u)
    y = x @ a.T + (rng.uniform(-noise, noise, size=(n, dim_out)) if noise > 0 else 0.0)
    ds = Dataset(x, y, name)
    cut = int(round(0.8 * n))
    order = rng.permutation(n)
    return TaskSpec(ds.take(np.sort(order[:cut]), f"{name}/train"),
                    ds.take(np.sort(order[cut:]), f"{name}/eval"),
                    EMBEDDING, head=None, name=name)


def select_subset(ds: Dataset, labels: Iterable[int] | None = None,
                  indices: Sequence[int] | None = None, name: str | None = None) -> Dataset:
    """Rows whose class is in ``labels`` or whose position is in ``indices``."""
    if (labels is None) == (indices is None):
        raise ConfigError("select_subset needs exactly one of labels or indices")
    if labels is not None:
        if not ds.is_classification:
            raise ConfigError("label predicate on a dataset without class labels")
        mask = np.isin(ds.labels, np.fromiter(labels, dtype=np.int64))
    else:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(ds)):
            raise ConfigError("subset index out of range")
        mask = np.zeros(len(ds), dtype=bool)
        mask[idx] = True
    if not mask.any():
        raise ConfigError("subset predicate selects no points")
    return ds.take(np.flatnonzero(mask), name or f"{ds.name}/subset")


def with_importance_set(task: TaskSpec, subset: Dataset) -> TaskSpec:
    return replace(task, importance_set=subset)

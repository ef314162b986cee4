"""CIFAR-10 ingestion, per-task label remapping and seeded batching."""

from __future__ import annotations

import os
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
import torch

CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")
RECORD_BYTES = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
DATA_ENV = "DEEPBROADCAST_DATA"


class DataError(RuntimeError):
    pass


@dataclass
class TaskSpec:
    """One receiver's task.

    ``classes`` lists the CIFAR-10 class indices mapped to label 1 of a binary
    task; ``None`` keeps the 10-class labels unchanged.
    """

    name: str = "task3"
    kind: str = "classify"  # classify | recover
    classes: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.kind not in ("classify", "recover"):
            raise DataError(f"unknown task kind {self.kind!r}")
        if self.classes is not None:
            self.classes = sorted(int(c) for c in self.classes)
            if any(not 0 <= c <= 9 for c in self.classes):
                raise DataError(f"task {self.name}: class indices must lie in 0..9")
            if not 0 < len(self.classes) < 10:
                raise DataError(f"task {self.name}: a binary task needs a proper, nonempty class subset")

    @property
    def n_label(self) -> Optional[int]:
        if self.kind == "recover":
            return None
        return 10 if self.classes is None else 2

    def head(self) -> dict:
        return {"kind": self.kind, "n_label": self.n_label or 0}


TASK1 = TaskSpec("task1", "classify", [CLASSES.index(c) for c in ("bird", "cat", "deer", "dog", "frog", "horse")])
TASK2 = TaskSpec("task2", "classify", [CLASSES.index(c) for c in ("automobile", "cat", "dog", "truck")])
TASK3 = TaskSpec("task3", "classify", None)
RECOVER = TaskSpec("recover", "recover", None)


def map_task_labels(labels10, spec: TaskSpec) -> np.ndarray:
    labels10 = np.asarray(labels10, dtype=np.int64)
    if labels10.size and (labels10.min() < 0 or labels10.max() > 9):
        raise DataError("CIFAR-10 labels must lie in 0..9")
    if spec.classes is None:
        return labels10.copy()
    return np.isin(labels10, spec.classes).astype(np.int64)


@dataclass
class Dataset:
    """Images are kept as uint8 (N, 3, 32, 32); :func:`normalize` maps them to [0, 1]."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    def subset(self, n_train=None, n_test=None) -> "Dataset":
        return Dataset(self.train_images[:n_train], self.train_labels[:n_train],
                       self.test_images[:n_test], self.test_labels[:n_test])


def normalize(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(images, dtype=np.float32) / 255.0)


def denormalize(x: torch.Tensor) -> np.ndarray:
    return np.clip(np.rint(x.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)


def _read_batch(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"missing CIFAR-10 batch file {path.name} in {path.parent}") from exc
    if not raw or len(raw) % RECORD_BYTES:
        raise DataError(f"corrupt CIFAR-10 batch file {path.name}: {len(raw)} bytes is not a whole number of records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"corrupt CIFAR-10 batch file {path.name}: label byte > 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def resolve_data_dir(path=None) -> Path:
    path = Path(path or os.environ.get(DATA_ENV, "data"))
    if (path / "cifar-10-batches-bin").is_dir():
        path = path / "cifar-10-batches-bin"
    return path


def load_cifar10(path=None, strict=True) -> Dataset:
    """Read the binary distribution (``data_batch_{1..5}.bin`` and ``test_batch.bin``)."""
    path = resolve_data_dir(path)
    parts = [_read_batch(path / f) for f in TRAIN_FILES]
    test_x, test_y = _read_batch(path / TEST_FILE)
    ds = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), test_x, test_y)
    if strict and (len(ds.train_labels) != 50000 or len(ds.test_labels) != 10000):
        raise DataError(f"expected 50000/10000 images, found {len(ds.train_labels)}/{len(ds.test_labels)} in {path}")
    return ds


def write_cifar10_binary(path, ds: Dataset) -> Path:
    """Write ``ds`` in the binary layout (five train batches plus test batch)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    def dump(fname, images, labels):
        rec = np.concatenate([labels.astype(np.uint8)[:, None], images.reshape(len(labels), -1)], axis=1)
        (path / fname).write_bytes(rec.tobytes())

    for fname, idx in zip(TRAIN_FILES, np.array_split(np.arange(len(ds.train_labels)), 5)):
        dump(fname, ds.train_images[idx], ds.train_labels[idx])
    dump(TEST_FILE, ds.test_images, ds.test_labels)
    return path


def fetch_cifar10(dest=None, url=CIFAR10_URL) -> Path:
    dest = Path(dest or os.environ.get(DATA_ENV, "data"))
    dest.mkdir(parents=True, exist_ok=True)
    archive = dest / "cifar-10-binary.tar.gz"
    if not archive.exists():
        tmp = archive.with_suffix(".part")
        try:
            urllib.request.urlretrieve(url, tmp)
        except OSError as exc:
            raise DataError(f"download of {url} failed: {exc}") from exc
        tmp.replace(archive)
    with tarfile.open(archive) as tar:
        tar.extractall(dest, filter="data") if hasattr(tarfile, "data_filter") else tar.extractall(dest)
    return resolve_data_dir(dest)


def synthetic_dataset(n_train=5000, n_test=1000, seed=0, noise=0.35) -> Dataset:
    """Class-conditional low-frequency patterns in the CIFAR-10 layout.

    Only for smoke runs and tests where the real data is unavailable; accuracy
    on it says nothing about CIFAR-10.
    """
    rng = np.random.default_rng(seed)
    templates = rng.uniform(-1, 1, size=(10, 3, 4, 4))

    def draw(n):
        labels = rng.integers(0, 10, size=n)
        base = np.kron(templates[labels], np.ones((1, 1, 8, 8)))
        x = 0.5 + 0.25 * base + noise * 0.25 * rng.standard_normal((n, 3, 32, 32))
        return (np.clip(x, 0, 1) * 255).round().astype(np.uint8), labels.astype(np.int64)

    tr_x, tr_y = draw(n_train)
    te_x, te_y = draw(n_test)
    return Dataset(tr_x, tr_y, te_x, te_y)


def task_targets(x: torch.Tensor, labels10: np.ndarray, tasks: Sequence[TaskSpec]) -> list:
    out = []
    for t in tasks:
        if t.kind == "recover":
            out.append(x)
        else:
            out.append(torch.from_numpy(map_task_labels(labels10, t)))
    return out


def batches(images: np.ndarray, labels10: np.ndarray, tasks: Sequence[TaskSpec], batch_size: int,
            rng: Optional[np.random.Generator] = None) -> Iterator[tuple]:
    """Yield ``(x, targets)`` with one target per task; ``rng=None`` keeps the stored order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(labels10)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = np.sort(order[start:start + batch_size]) if rng is None else order[start:start + batch_size]
        x = normalize(images[idx])
        yield x, task_targets(x, labels10[idx], tasks)


def n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)

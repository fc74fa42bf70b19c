"""Synthetic planted-target data, CSV ingestion, and minibatch iteration."""

from __future__ import annotations

import csv
import io
import zipfile
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

DEFAULT_D_IN = 10
DEFAULT_N_TRAIN = 25_000
DEFAULT_N_TEST = 2_500


@dataclass
class Dataset:
    """Feature columns plus labels for one split.

    y is a flat integer array for classification targets or a float array
    (d_out x N, or flat) for regression. The planted-target teacher vector is
    carried along for auditability when known.
    """

    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    seed: int | None = None
    teacher: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise InputError(f"features must be 2-D (features x samples), got {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise InputError("features contain non-finite values")
        self.y = np.asarray(self.y)
        if self.y.ndim not in (1, 2):
            raise InputError(f"labels must be 1-D or 2-D, got shape {self.y.shape}")
        n_labels = self.y.shape[-1]
        if n_labels != self.n_samples:
            raise InputError(f"{n_labels} labels for {self.n_samples} samples")

    @property
    def n_samples(self) -> int:
        return self.X.shape[1]

    @property
    def n_features(self) -> int:
        return self.X.shape[0]


def gen_planted(d_in: int = DEFAULT_D_IN, n_train: int = DEFAULT_N_TRAIN,
                n_test: int = DEFAULT_N_TEST, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Standard-Gaussian inputs with binary labels from a hidden linear teacher.

    The teacher is a bias-free random linear map of the input width; the
    label is 1 exactly when the teacher's response is positive, which keeps
    the classes balanced in expectation. Draw order (teacher, train inputs,
    test inputs) is fixed, so one seed pins both splits.
    """
    if d_in < 1 or n_train < 1 or n_test < 1:
        raise ConfigError("d_in, n_train, n_test must all be >= 1")
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal(d_in)
    x_train = rng.standard_normal((d_in, n_train))
    x_test = rng.standard_normal((d_in, n_test))
    y_train = (teacher @ x_train > 0.0).astype(np.int64)
    y_test = (teacher @ x_test > 0.0).astype(np.int64)
    train = Dataset(x_train, y_train, split="train", seed=seed, teacher=teacher)
    test = Dataset(x_test, y_test, split="test", seed=seed, teacher=teacher)
    return train, test


def load_csv(path) -> Dataset:
    """Parse a headered CSV with numeric feature columns and a final label column."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if len(header) < 2:
            raise InputError(f"{path}: need at least one feature column and one label column")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            parsed = []
            for col, cell in zip(header, row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise InputError(
                        f"{path}:{line_no}: column {col!r}: not a number: {cell!r}") from None
            rows.append(parsed)
    if not rows:
        raise InputError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        raise InputError(f"{path}: non-finite value in data")
    x = table[:, :-1].T
    y = table[:, -1]
    if np.all(y == y.astype(np.int64)):
        y = y.astype(np.int64)
    return Dataset(x, y, split="train")


def minibatches(dataset: Dataset, batch_size: int, rng: np.random.Generator):
    """One epoch of shuffled minibatches; the final short batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    for idx in permuted_batches(dataset.n_samples, batch_size, rng):
        if dataset.y.ndim == 1:
            yield dataset.X[:, idx], dataset.y[idx]
        else:
            yield dataset.X[:, idx], dataset.y[:, idx]


def permuted_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """A fresh permutation of range(n), cut into batch_size runs."""
    perm = rng.permutation(n)
    return [perm[start:start + batch_size] for start in range(0, n, batch_size)]


def save_planted(path, train: Dataset, test: Dataset) -> None:
    """Write both splits plus the teacher to one npz-compatible archive.

    The archive is assembled with fixed zip timestamps so regenerating with
    the same seed produces byte-identical files.
    """
    if train.teacher is None:
        raise InputError("planted dataset cache needs the teacher vector")
    arrays = {
        "x_train": train.X,
        "y_train": train.y,
        "x_test": test.X,
        "y_test": test.y,
        "teacher": train.teacher,
        "seed": np.asarray(-1 if train.seed is None else train.seed, dtype=np.int64),
    }
    write_npz(path, arrays)


def load_planted(path) -> tuple[Dataset, Dataset]:
    """Load a cache written by save_planted."""
    try:
        with np.load(path) as archive:
            seed = int(archive["seed"])
            teacher = archive["teacher"]
            train = Dataset(archive["x_train"], archive["y_train"], split="train",
                            seed=seed, teacher=teacher)
            test = Dataset(archive["x_test"], archive["y_test"], split="test",
                           seed=seed, teacher=teacher)
    except (KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise InputError(f"{path}: not a planted dataset cache: {exc}") from exc
    return train, test


def write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """np.load-compatible archive with fixed zip timestamps (byte-reproducible)."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())

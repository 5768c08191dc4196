"""Labeled datasets, train/test splits, and the CSV schema used by the CLI.

CSV files carry a header.  Feature columns are named ``x_1 .. x_p`` and outcome
columns ``y`` (single outcome) or ``y_1 .. y_m``.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


def split_indices(n, ratio=0.7, seed=0):
    """Random train/test split of ``range(n)``; deterministic per seed."""
    if not 0 < ratio < 1:
        raise DataError("split ratio must lie in (0, 1)")
    if n < 2:
        raise DataError("need at least two rows to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class LabeledDataset:
    """Raw arrays plus standardization constants computed on the training rows.

    ``outcomes`` may be a vector (one outcome) or an ``(n, m)`` matrix.
    """

    features_raw: np.ndarray
    outcomes_raw: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    feature_means: np.ndarray = field(init=False)
    feature_sds: np.ndarray = field(init=False)
    outcome_mean: np.ndarray | float = field(init=False)
    outcome_sd: np.ndarray | float = field(init=False)

    def __post_init__(self):
        X = np.asarray(self.features_raw, dtype=float)
        y = np.asarray(self.outcomes_raw, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or y.shape[0] != X.shape[0]:
            raise DataError("features and outcomes must have the same number of rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite values")
        self.features_raw, self.outcomes_raw = X, y
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)
        if self.train_idx.size == 0:
            raise DataError("training split is empty")
        Xt, yt = X[self.train_idx], y[self.train_idx]
        self.feature_means = Xt.mean(axis=0)
        sds = Xt.std(axis=0)
        self.feature_sds = np.where(sds > 0, sds, 1.0)
        self.outcome_mean = yt.mean(axis=0)
        self.outcome_sd = yt.std(axis=0)
        if np.any(np.asarray(self.outcome_sd) <= 0):
            raise DataError("training outcomes have zero spread")

    @classmethod
    def from_arrays(cls, X, y, ratio=0.7, seed=0, train_idx=None, test_idx=None):
        X = np.asarray(X, dtype=float)
        if train_idx is None:
            train_idx, test_idx = split_indices(len(X), ratio, seed)
        elif test_idx is None:
            test_idx = np.setdiff1d(np.arange(len(X)), train_idx)
        return cls(X, np.asarray(y, dtype=float), train_idx, test_idx)

    @property
    def n_features(self):
        return self.features_raw.shape[1]

    @property
    def n(self):
        return self.features_raw.shape[0]

    def standardize_features(self, X):
        return (np.asarray(X, dtype=float) - self.feature_means) / self.feature_sds

    def standardize_outcomes(self, y):
        return (np.asarray(y, dtype=float) - self.outcome_mean) / self.outcome_sd

    def train(self, standardized=True):
        X, y = self.features_raw[self.train_idx], self.outcomes_raw[self.train_idx]
        if standardized:
            return self.standardize_features(X), self.standardize_outcomes(y)
        return X, y

    def test(self, standardized=False):
        X, y = self.features_raw[self.test_idx], self.outcomes_raw[self.test_idx]
        if standardized:
            return self.standardize_features(X), self.standardize_outcomes(y)
        return X, y


def _atomic_write(path, write_fn, mode="w"):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_rows(path, header, rows):
    """Write a delimited table atomically (temp file + rename)."""

    def _write(fh):
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])

    _atomic_write(path, _write)


def read_table(path):
    """Read a headed CSV; returns ``(header, rows)`` with rows as string lists."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [r for r in reader if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not header:
        raise DataError(f"{path} has no header row")
    return header, rows


def write_dataset_csv(path, X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    header = [f"x_{j + 1}" for j in range(X.shape[1])]
    if y.ndim == 1:
        header.append("y")
        Y = y[:, None]
    else:
        header += [f"y_{j + 1}" for j in range(y.shape[1])]
        Y = y
    write_rows(path, header, np.hstack([X, Y]).tolist())


def read_dataset_csv(path):
    """Parse a dataset CSV into ``(X, y)``; ``y`` is 2-D for multi-outcome files."""
    header, rows = read_table(path)
    x_cols = [i for i, name in enumerate(header) if name.startswith("x_")]
    y_cols = [i for i, name in enumerate(header) if name == "y" or name.startswith("y_")]
    if not x_cols or not y_cols or len(x_cols) + len(y_cols) != len(header):
        raise DataError(f"{path}: header must be x_1..x_p followed by y or y_1..y_m")
    if not rows:
        raise DataError(f"{path} has no data rows")
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc
    if data.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: missing or non-finite values")
    X = data[:, x_cols]
    y = data[:, y_cols]
    if header[y_cols[0]] == "y" and len(y_cols) == 1:
        y = y[:, 0]
    return X, y

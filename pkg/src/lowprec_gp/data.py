"""Dataset ingestion, standardization and the synthetic GP generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSpec, assemble_kernel_matrix

__all__ = [
    "Dataset",
    "ParseError",
    "EmptyDataset",
    "load_csv",
    "synthetic_gp",
]


class ParseError(ValueError):
    """A CSV cell could not be parsed; message names row and column."""


class EmptyDataset(ValueError):
    """No usable rows survived ingestion."""


@dataclass
class Dataset:
    """Standardized train/test split with the statistics used to build it.

    Features and targets are standardized with train-split statistics; the
    raw target can be recovered as y * target_std + target_mean.
    """

    X: np.ndarray
    y: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_mean: float
    target_std: float
    n_dropped: int = 0
    source: str = "synthetic"

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def unstandardize_target(self, y) -> np.ndarray:
        return np.asarray(y) * self.target_std + self.target_mean

    def standardization(self) -> dict:
        return {
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }


def _standardize_split(X, y, test_idx, train_idx, n_dropped, source):
    Xtr, ytr = X[train_idx], y[train_idx]
    Xte, yte = X[test_idx], y[test_idx]
    f_mean = Xtr.mean(axis=0)
    f_std = Xtr.std(axis=0)
    f_std = np.where(f_std > 0, f_std, 1.0)
    t_mean = float(ytr.mean())
    t_std = float(ytr.std())
    if t_std == 0.0:
        t_std = 1.0
    return Dataset(
        X=(Xtr - f_mean) / f_std,
        y=(ytr - t_mean) / t_std,
        X_test=(Xte - f_mean) / f_std,
        y_test=(yte - t_mean) / t_std,
        feature_means=f_mean,
        feature_stds=f_std,
        target_mean=t_mean,
        target_std=t_std,
        n_dropped=n_dropped,
        source=source,
    )


def load_csv(path, target_column: str, split_fraction: float = 0.1,
             seed: int = 0) -> Dataset:
    """Parse a headed numeric CSV into a standardized train/test dataset.

    Non-finite rows are dropped (counted in ``n_dropped``); both features
    and target are standardized with train-split statistics.  The test
    split takes ``split_fraction`` of the rows (default 10%), chosen by a
    seeded shuffle.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if target_column not in header:
            raise ParseError(
                f"{path}: target column {target_column!r} not in header {header}"
            )
        t_col = header.index(target_column)
        rows = []
        n_dropped = 0
        for r_idx, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {r_idx} has {len(row)} cells, expected "
                    f"{len(header)}"
                )
            vals = []
            for c_idx, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: row {r_idx}, column {header[c_idx]!r}: "
                        f"non-numeric cell {cell.strip()!r}"
                    ) from None
            if all(math.isfinite(v) for v in vals):
                rows.append(vals)
            else:
                n_dropped += 1
    if not rows:
        raise EmptyDataset(f"{path}: no finite rows")
    data = np.asarray(rows, dtype=np.float64)
    y = data[:, t_col]
    X = np.delete(data, t_col, axis=1)
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(round(n * split_fraction))
    n_test = min(max(n_test, 0), n - 1)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if n_test == 0:
        test_idx = train_idx[:0]
    return _standardize_split(X, y, test_idx, train_idx, n_dropped, str(path))


def synthetic_gp(n: int, dim: int, family: str, *, lengthscale: float = 1.0,
                 outputscale_sq: float = 1.0, noise_sq: float = 0.1,
                 seed: int = 0, n_test: int | None = None,
                 standardize: bool = True) -> Dataset:
    """Draw a dataset from a double-precision GP prior with known parameters.

    Inputs are standard normal; the latent function is an exact prior draw
    (dense Cholesky, desk scale) plus Gaussian observation noise.
    """
    if n_test is None:
        n_test = max(1, n // 10)
    rng = np.random.default_rng(seed)
    total = n + n_test
    X = rng.standard_normal((total, dim))
    spec = KernelSpec(family, lengthscales=lengthscale,
                      outputscale_sq=outputscale_sq, noise_sq=noise_sq)
    K = assemble_kernel_matrix(spec, X, "fp64", with_noise=False)
    K[np.diag_indices(total)] += 1e-10 * outputscale_sq
    L = np.linalg.cholesky(K)
    f = L @ rng.standard_normal(total)
    y = f + math.sqrt(noise_sq) * rng.standard_normal(total)
    train_idx = np.arange(n)
    test_idx = np.arange(n, total)
    if not standardize:
        return Dataset(
            X=X[train_idx], y=y[train_idx], X_test=X[test_idx],
            y_test=y[test_idx],
            feature_means=np.zeros(dim), feature_stds=np.ones(dim),
            target_mean=0.0, target_std=1.0,
        )
    return _standardize_split(X, y, test_idx, train_idx, 0, "synthetic")

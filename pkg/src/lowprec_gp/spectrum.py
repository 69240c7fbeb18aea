"""Eigenspectrum diagnostics of quantized kernel matrices.

Quantization enters only through matrix assembly: the eigendecomposition of
the (symmetrized) low-precision matrix always runs in double, because the
object of study is the spectrum *of* the quantized matrix, not a quantized
eigensolver.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .formats import FloatFormat, get_format
from .kernels import KernelSpec, _as_points, assemble_kernel_matrix

__all__ = [
    "SpectrumReport",
    "EigFailure",
    "DomainError",
    "quantized_spectrum",
    "effective_dimension",
    "quantized_ed_bound",
    "rbf_eigen_cutoff",
]


class EigFailure(RuntimeError):
    """The dense eigendecomposition did not converge."""


class DomainError(ValueError):
    """Arguments fall outside the analysis' validity region."""


@dataclass(frozen=True)
class SpectrumReport:
    """Descending eigenvalues of a kernel matrix assembled in a format."""

    eigenvalues: np.ndarray
    format: FloatFormat
    n: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "eigenvalue"])
            for i, val in enumerate(self.eigenvalues):
                w.writerow([i, repr(float(val))])


def quantized_spectrum(spec: KernelSpec, X, fmt) -> SpectrumReport:
    """Spectrum of the noise-free kernel matrix assembled in fmt.

    The assembled matrix is symmetrized as (K + K^T)/2 in double before the
    double-precision eigendecomposition; eigenvalues return descending.
    """
    fmt = get_format(fmt)
    X = _as_points(X)
    K = assemble_kernel_matrix(spec, X, fmt, with_noise=False)
    K = 0.5 * (K + K.T)
    try:
        lam = np.linalg.eigvalsh(K)
    except np.linalg.LinAlgError as exc:
        raise EigFailure(str(exc)) from exc
    return SpectrumReport(eigenvalues=lam[::-1].copy(), format=fmt,
                          n=X.shape[0])


def effective_dimension(eigenvalues, s: float) -> float:
    """sum_i lambda_i / (lambda_i + s), with tiny negatives clamped to zero."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if not s > 0:
        raise DomainError("s must be positive")
    if np.any(lam < -1e-8):
        raise DomainError("eigenvalues must be >= -1e-8")
    lam = np.maximum(lam, 0.0)
    return float(np.sum(lam / (lam + s)))


def quantized_ed_bound(eigenvalues, s: float, delta: float, *,
                       samples: int = 10_000, seed: int = 0) -> dict:
    """Expected effective dimension under uniform quantization noise.

    Models each eigenvalue as Q(lambda) ~ U(lambda - delta, lambda + delta)
    and returns the truncated-series closed-form lower bound together with a
    Monte-Carlo estimate of E[sum Q/(Q+s)] and its standard error.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if not (s > 0 and delta > 0):
        raise DomainError("s and delta must be positive")
    if np.any(lam - delta + s <= 0):
        raise DomainError("requires lambda - delta + s > 0 for every eigenvalue")
    den = lam + s + delta
    closed = float(np.sum(1.0 - s / den - delta * s / den**2))
    rng = np.random.default_rng(seed)
    Q = rng.uniform(lam - delta, lam + delta, size=(samples, lam.size))
    vals = np.sum(Q / (Q + s), axis=1)
    mc = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / math.sqrt(samples))
    return {"closed_form_lower": closed, "mc_estimate": mc,
            "mc_stderr": stderr}


def expected_ed_exact(eigenvalues, s: float, delta: float) -> float:
    """Exact E[sum Q/(Q+s)] via the log-form integral (test oracle)."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(lam - delta + s <= 0):
        raise DomainError("requires lambda - delta + s > 0")
    return float(np.sum(
        1.0 + (s / (2.0 * delta)) * np.log((lam + s - delta) / (lam + s + delta))
    ))


def rbf_eigen_cutoff(a: float, A: float, B: float, delta: float) -> int:
    """Index past which the model spectrum sqrt(2a/A) B^k rounds to zero.

    Smallest integer k with k >= (log(delta) + log(A/(2a))/2) / log(B).
    """
    if not (a > 0 and A > 0):
        raise DomainError("a and A must be positive")
    if not (0.0 < B < 1.0):
        raise DomainError("B must lie in (0, 1)")
    if not (0.0 < delta < 1.0):
        raise DomainError("delta must lie in (0, 1)")
    bound = (math.log(delta) + 0.5 * math.log(A / (2.0 * a))) / math.log(B)
    return int(math.ceil(bound - 1e-12))

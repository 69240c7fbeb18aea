"""Pivoted-Cholesky low-rank preconditioner and its Woodbury application.

The factorization runs greedily on the noise-free kernel matrix K, picking
at each step the index with the largest remaining diagonal residual; k steps
yield K ~= L_k L_k^T, so K~ ~= L_k L_k^T + sigma^2 I and the preconditioner
inverse is applied through the Woodbury identity with a dense k x k inner
solve.  All preconditioner arithmetic is carried in single precision (the
inner solve relies on LAPACK, which has no half-precision kernels), and the
result is cast to the solver's compute format by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import backend
from ._core_py import ACC_BLOCK_SAME
from .formats import FP32, FloatFormat, get_format, quantize
from .kernels import KernelSpec, _as_points, kernel_rows

__all__ = [
    "PivotedCholeskyFactor",
    "NotPositiveDefinite",
    "InnerSolveFailed",
    "pivoted_cholesky",
    "kernel_preconditioner",
    "precond_apply",
    "direct_woodbury_solve",
    "save_factor",
    "load_factor",
]


class NotPositiveDefinite(ValueError):
    """A pivot residual turned negative beyond round-off tolerance."""


class InnerSolveFailed(RuntimeError):
    """The k x k Woodbury system could not be Cholesky-factorized."""


@dataclass
class PivotedCholeskyFactor:
    """Rank-k factor L (float32) with K ~= L L^T, plus the noise level."""

    L: np.ndarray
    pivots: list
    sigma_sq: float
    _inner: tuple = field(default=None, repr=False)

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def _inner_factor(self):
        """Cholesky of (I + sigma^-2 L^T L) in float32, cached."""
        if self._inner is None:
            k = self.rank
            inv_s2 = np.float32(1.0) / np.float32(self.sigma_sq)
            G = np.eye(k, dtype=np.float32) + inv_s2 * (self.L.T @ self.L)
            try:
                self._inner = scipy.linalg.cho_factor(G, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise InnerSolveFailed(str(exc)) from exc
        return self._inner


def pivoted_cholesky(row_provider, diag, rank: int, sigma_sq: float,
                     rel_tol: float = 1e-10) -> PivotedCholeskyFactor:
    """Greedy partial Cholesky of an SPD matrix accessed by rows.

    ``row_provider(i)`` must return row i of the matrix in single precision
    or wider.  Stops early once the largest diagonal residual falls below
    ``rel_tol * max(diag)``; raises ``NotPositiveDefinite`` if a residual
    drops below ``-1e-8 * max(diag)``.
    """
    diag = np.asarray(diag, dtype=np.float32).copy()
    n = diag.shape[0]
    rank = int(rank)
    if rank < 0 or rank > n:
        raise ValueError(f"rank must lie in [0, {n}]")
    scale = float(np.max(diag)) if n else 0.0
    L = np.zeros((n, rank), dtype=np.float32)
    pivots: list[int] = []
    for m in range(rank):
        i = int(np.argmax(diag))
        d = float(diag[i])
        if d < -1e-8 * scale:
            raise NotPositiveDefinite(
                f"diagonal residual {d:.3e} at pivot {i}"
            )
        if d < rel_tol * scale:
            L = L[:, :m]
            break
        row = np.asarray(row_provider(i), dtype=np.float32)
        if row.shape != (n,):
            raise ValueError("row_provider must return a full matrix row")
        col = row - L[:, :m] @ L[i, :m]
        col /= np.float32(np.sqrt(d))
        L[:, m] = col
        diag -= col * col
        diag[i] = 0.0
        pivots.append(i)
    return PivotedCholeskyFactor(L=L, pivots=pivots, sigma_sq=float(sigma_sq))


def kernel_preconditioner(spec: KernelSpec, X, rank: int,
                          rel_tol: float = 1e-10) -> PivotedCholeskyFactor:
    """Pivoted-Cholesky factor of the noise-free kernel matrix over X.

    The pivoting diagonal is exact for stationary kernels: a^2, constant.
    """
    X = _as_points(X)
    n = X.shape[0]

    def row(i):
        return kernel_rows(spec, X[i][None, :], X, FP32)[0]

    diag = np.full(n, spec.outputscale_sq, dtype=np.float32)
    return pivoted_cholesky(row, diag, rank, spec.noise_sq, rel_tol)


def precond_apply(factor: PivotedCholeskyFactor, w) -> np.ndarray:
    """P^{-1} w with P = L L^T + sigma^2 I, via the Woodbury identity.

    Inner k x k system solved by dense Cholesky in single precision; the
    caller casts the float32 result into the solver's compute format.
    Accepts a vector or a matrix of column vectors.
    """
    w = np.asarray(w)
    single = w.ndim == 1
    W = np.asarray(w, dtype=np.float32)
    if single:
        W = W[:, None]
    inv_s2 = np.float32(1.0) / np.float32(factor.sigma_sq)
    if factor.rank == 0:
        out = inv_s2 * W
        return out[:, 0].astype(np.float64) if single else out.astype(np.float64)
    cf = factor._inner_factor()
    t = factor.L.T @ W
    s = scipy.linalg.cho_solve(cf, t).astype(np.float32)
    out = inv_s2 * W - (inv_s2 * inv_s2) * (factor.L @ s)
    return out[:, 0].astype(np.float64) if single else out.astype(np.float64)


def _emulated_cholesky(G: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Dense lower Cholesky with every operation rounded into fmt."""
    k = G.shape[0]
    C = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1):
            acc = float(G[i, j])
            for t in range(j):
                acc = quantize(acc - quantize(C[i, t] * C[j, t], fmt), fmt)
            if i == j:
                if not acc > 0 or not np.isfinite(acc):
                    raise InnerSolveFailed(
                        f"emulated Cholesky breakdown at index {i}: {acc}"
                    )
                C[i, j] = quantize(np.sqrt(acc), fmt)
            else:
                C[i, j] = quantize(acc / C[j, j], fmt)
    return C


def _emulated_tri_solve(C: np.ndarray, b: np.ndarray, fmt: FloatFormat,
                        lower: bool) -> np.ndarray:
    k = C.shape[0]
    x = np.zeros(k)
    order = range(k) if lower else range(k - 1, -1, -1)
    for i in order:
        acc = float(b[i])
        js = range(i) if lower else range(i + 1, k)
        for j in js:
            cij = C[i, j] if lower else C[j, i]
            acc = quantize(acc - quantize(cij * x[j], fmt), fmt)
        x[i] = quantize(acc / C[i, i], fmt)
    return x


def direct_woodbury_solve(spec: KernelSpec, X, b, rank: int, fmt) -> dict:
    """Use the Woodbury identity itself as a direct solver, entirely in fmt.

    The factor comes from the standard single-precision pivoted Cholesky;
    every operation of the Woodbury application is then emulated in fmt.
    sigma^-4 is applied as two sigma^-2 scalings so the half-precision run
    measures accumulated round-off rather than trivial scalar overflow.
    Returns the solution and its true relative residual ||K~x - b|| / ||b||,
    both measured against the exact kernel matrix in double precision.
    """
    fmt = get_format(fmt)
    X = _as_points(X)
    b = np.asarray(b, dtype=np.float64).ravel()
    n = X.shape[0]
    factor = kernel_preconditioner(spec, X, rank)
    k = factor.rank
    q = lambda a: np.asarray(quantize(a, fmt))
    inv_s2 = quantize(1.0 / spec.noise_sq, fmt)
    bq = q(b)
    w1 = q(inv_s2 * bq)
    if k == 0:
        x = w1
    else:
        Lq = q(factor.L.astype(np.float64))
        polc = dict(fmt=fmt, acc_mode=ACC_BLOCK_SAME, wide_fmt=fmt,
                    block_size=64)
        t = backend.mvm_dense(np.ascontiguousarray(Lq.T), w1[:, None], **polc)[:, 0]
        G0 = backend.mvm_dense(np.ascontiguousarray(Lq.T), np.ascontiguousarray(Lq), **polc)
        G = q(np.eye(k) + q(inv_s2 * G0))
        C = _emulated_cholesky(G, fmt)
        y = _emulated_tri_solve(C, t, fmt, lower=True)
        s = _emulated_tri_solve(C, y, fmt, lower=False)
        u = backend.mvm_dense(Lq, s[:, None], **polc)[:, 0]
        x = q(w1 - q(inv_s2 * u))

    # True residual in double, against the exact kernel system.
    from .kernels import assemble_kernel_matrix

    K = assemble_kernel_matrix(spec, X, "fp64", with_noise=True)
    residual = float(np.linalg.norm(K @ x - b) / np.linalg.norm(b))
    return {"x": x, "residual_norm": residual}


def save_factor(factor: PivotedCholeskyFactor, path) -> None:
    """Dump a factor to an .npz file (column-major float32 L, pivots, noise)."""
    np.savez(path, L=np.asfortranarray(factor.L), pivots=np.asarray(factor.pivots),
             sigma_sq=factor.sigma_sq)


def load_factor(path) -> PivotedCholeskyFactor:
    data = np.load(path)
    return PivotedCholeskyFactor(
        L=np.ascontiguousarray(data["L"], dtype=np.float32),
        pivots=[int(i) for i in data["pivots"]],
        sigma_sq=float(data["sigma_sq"]),
    )

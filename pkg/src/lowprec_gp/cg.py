"""Conjugate gradients: the classic recurrence and the enhanced-stability one.

``cg_standard`` is textbook preconditioned CG with every operation carried
in the compute format, including the inner products for the step sizes.  In
half precision those inner products overflow or lose the leading digits,
which is exactly the observed failure mode.

``cg_stable`` replaces the step-size recurrences with signed log-scale
quantities computed through ``lse_dot`` (double width), re-orthogonalizes
each new residual against the stored orthonormal set built from all past
residuals, and re-quantizes the step scalars into the compute format before
the vector updates.  Vectors and MVMs stay in the compute format; the
stopping test uses a single-precision residual norm while the reported
history is evaluated in double.

Both solvers update the search direction from the preconditioned residual
(d_{k+1} = -z_{k+1} + beta d_k).  Multi-RHS solves run the same iteration
with an individual set of step sizes per column; a column stops updating
once its residual passes the tolerance, and a per-column breakdown never
aborts the other columns.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .formats import FP64, FloatFormat, get_format, lse_dot, quantize
from .mvm import KernelOperator, MvmPolicy, OverflowDetected, dot_in_format
from .precond import PivotedCholeskyFactor, kernel_preconditioner, precond_apply

__all__ = [
    "CgConfig",
    "SolveReport",
    "cg_standard",
    "cg_stable",
    "cg_batched",
    "solve_kernel_system",
]

CONVERGED = "converged"
MAX_ITERS = "max_iters"
BREAKDOWN = "breakdown"


@dataclass(frozen=True)
class CgConfig:
    """Solver configuration shared by the standard and stable variants."""

    tolerance: float = 1.0
    max_iters: int = 50
    reorthogonalize: bool = True
    log_scale_steps: bool = True
    compute_format: FloatFormat = FP64
    preconditioner: PivotedCholeskyFactor | None = None

    def __post_init__(self):
        object.__setattr__(self, "compute_format",
                           get_format(self.compute_format))
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SolveReport:
    """Solution plus per-iteration residual norms and termination status.

    For multi-RHS solves ``solution`` is (N, C) and the history, status,
    iteration and step-size fields hold one entry per column.
    """

    solution: np.ndarray
    residual_history: object
    iterations: object
    status: object
    alpha_history: object = None
    tolerance: float = None
    batched: bool = False
    final_residual: np.ndarray = None

    def column(self, c: int) -> "SolveReport":
        if not self.batched:
            raise ValueError("not a batched report")
        return SolveReport(
            solution=self.solution[:, c],
            residual_history=self.residual_history[c],
            iterations=self.iterations[c],
            status=self.status[c],
            alpha_history=self.alpha_history[c],
            tolerance=self.tolerance,
            batched=False,
            final_residual=self.final_residual[:, c],
        )

    def to_dict(self) -> dict:
        if self.batched:
            hist = [list(map(float, h)) for h in self.residual_history]
            iters = [int(i) for i in self.iterations]
            status = list(self.status)
        else:
            hist = list(map(float, self.residual_history))
            iters = int(self.iterations)
            status = self.status
        return {
            "iterations": iters,
            "status": status,
            "tolerance": self.tolerance,
            "residual_history": hist,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _norm64(r: np.ndarray) -> float:
    return float(np.linalg.norm(r))


def _norm32(r: np.ndarray) -> float:
    return float(np.linalg.norm(r.astype(np.float32)))


def _apply_precond(P, R, fmt):
    if P is None:
        return R
    return np.asarray(quantize(precond_apply(P, R), fmt))


class _Column:
    """Per-column solver state for the batched iteration."""

    __slots__ = ("gamma", "log_gamma", "history", "alphas", "status",
                 "iterations", "basis")

    def __init__(self):
        self.gamma = None
        self.log_gamma = None
        self.history = []
        self.alphas = []
        self.status = None
        self.iterations = 0
        self.basis = []


def _run_cg(A, B, X0, cfg: CgConfig, stabilized: bool) -> SolveReport:
    fmt = cfg.compute_format
    q = lambda a: np.asarray(quantize(a, fmt))
    reorth = stabilized and cfg.reorthogonalize

    B = np.asarray(B, dtype=np.float64)
    n, ncols = B.shape
    B = q(B)
    if X0 is None:
        X = np.zeros((n, ncols))
        AX = np.zeros((n, ncols))
    else:
        X = q(np.asarray(X0, dtype=np.float64))
        AX = A.apply(X)
    R = q(AX - B)
    Z = _apply_precond(cfg.preconditioner, R, fmt)
    D = -Z

    cols = [_Column() for _ in range(ncols)]
    active = []
    for c, st in enumerate(cols):
        st.history.append(_norm64(R[:, c]))
        if _norm32(R[:, c]) < cfg.tolerance:
            st.status = CONVERGED
            continue
        ok = _init_gamma(st, R[:, c], Z[:, c], fmt, stabilized)
        if not ok:
            st.status = BREAKDOWN
            continue
        active.append(c)

    for _ in range(cfg.max_iters):
        if not active:
            break
        idx, AD = _apply_isolating(A, D, active, cols)
        still = []
        for m, c in enumerate(idx):
            st = cols[c]
            alpha = _step_alpha(st, D[:, c], AD[:, m], fmt, stabilized)
            if alpha is None:
                st.status = BREAKDOWN
                continue
            st.alphas.append(alpha)
            aq = quantize(alpha, fmt)
            X[:, c] = q(X[:, c] + q(aq * D[:, c]))
            r = q(R[:, c] + q(aq * AD[:, m]))
            if reorth:
                work = r.astype(np.float64)
                for u in st.basis:
                    work = work - (u @ work) * u
                r = q(work)
                nrm = float(np.linalg.norm(work))
                if nrm > 0.0 and np.isfinite(nrm):
                    st.basis.append(work / nrm)
            R[:, c] = r
            st.iterations += 1
            st.history.append(_norm64(r))

            z = _apply_precond(cfg.preconditioner, r[:, None], fmt)[:, 0]
            if _norm32(r) < cfg.tolerance:
                st.status = CONVERGED
                continue
            beta = _step_beta(st, r, z, fmt, stabilized)
            if beta is None:
                st.status = BREAKDOWN
                continue
            bq = quantize(beta, fmt)
            D[:, c] = q(-z + q(bq * D[:, c]))
            still.append(c)
        active = still

    for st in cols:
        if st.status is None:
            st.status = MAX_ITERS

    return SolveReport(
        solution=X,
        residual_history=[st.history for st in cols],
        iterations=[st.iterations for st in cols],
        status=[st.status for st in cols],
        alpha_history=[st.alphas for st in cols],
        tolerance=cfg.tolerance,
        batched=True,
        final_residual=R,
    )


def _apply_isolating(A, D, active, cols):
    """A @ D over the active columns; a column whose MVM overflows breaks down
    alone instead of aborting the whole batch."""
    idx = np.asarray(active, dtype=int)
    try:
        return idx, A.apply(D[:, idx])
    except OverflowDetected:
        pass
    keep = []
    outs = []
    for c in idx:
        try:
            outs.append(A.apply(D[:, c]))
            keep.append(c)
        except OverflowDetected:
            cols[c].status = BREAKDOWN
    if not keep:
        return np.asarray([], dtype=int), np.zeros((D.shape[0], 0))
    return np.asarray(keep, dtype=int), np.stack(outs, axis=1)


def _init_gamma(st: _Column, r, z, fmt, stabilized) -> bool:
    if stabilized:
        g = lse_dot(r, z)
        if g.sign <= 0:
            return False
        st.log_gamma = g.log_magnitude
    else:
        g = dot_in_format(r, z, fmt)
        if not math.isfinite(g) or g <= 0.0:
            return False
        st.gamma = g
    return True


def _step_alpha(st: _Column, d, ad, fmt, stabilized):
    if stabilized:
        den = lse_dot(d, ad)
        if den.sign <= 0:
            return None
        alpha = math.exp(st.log_gamma - den.log_magnitude)
    else:
        den = dot_in_format(d, ad, fmt)
        if not math.isfinite(den) or den <= 0.0:
            return None
        alpha = st.gamma / den
    if not math.isfinite(alpha):
        return None
    return alpha


def _step_beta(st: _Column, r, z, fmt, stabilized):
    if stabilized:
        g = lse_dot(r, z)
        if g.sign <= 0:
            return None
        beta = math.exp(g.log_magnitude - st.log_gamma)
        st.log_gamma = g.log_magnitude
    else:
        g = dot_in_format(r, z, fmt)
        if not math.isfinite(g) or g <= 0.0:
            return None
        beta = g / st.gamma
        st.gamma = g
    if not math.isfinite(beta):
        return None
    return beta


def _single(report: SolveReport) -> SolveReport:
    return SolveReport(
        solution=report.solution[:, 0],
        residual_history=report.residual_history[0],
        iterations=report.iterations[0],
        status=report.status[0],
        alpha_history=report.alpha_history[0],
        tolerance=report.tolerance,
        batched=False,
        final_residual=report.final_residual[:, 0],
    )


def cg_standard(A, b, x0=None, cfg: CgConfig = None) -> SolveReport:
    """Classic preconditioned CG with all operations in the compute format."""
    cfg = cfg or CgConfig()
    b = np.asarray(b, dtype=np.float64)
    X0 = None if x0 is None else np.asarray(x0, np.float64)[:, None]
    return _single(_run_cg(A, b[:, None], X0, cfg, stabilized=False))


def cg_stable(A, b, x0=None, cfg: CgConfig = None) -> SolveReport:
    """Enhanced-stability CG: log-scale step sizes plus re-orthogonalization."""
    cfg = cfg or CgConfig()
    b = np.asarray(b, dtype=np.float64)
    X0 = None if x0 is None else np.asarray(x0, np.float64)[:, None]
    return _single(_run_cg(A, b[:, None], X0, cfg, stabilized=True))


def cg_batched(A, B, cfg: CgConfig = None, X0=None) -> SolveReport:
    """Stable CG over several right-hand sides with per-column step sizes."""
    cfg = cfg or CgConfig()
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2:
        raise ValueError("cg_batched expects a matrix of column RHS vectors")
    return _run_cg(A, B, X0, cfg, stabilized=True)


def solve_kernel_system(spec, X, b, *, policy: MvmPolicy, rank: int = 5,
                        tolerance: float = 1.0, max_iters: int = 50,
                        stabilized: bool = True,
                        factor: PivotedCholeskyFactor = None) -> SolveReport:
    """Solve (a^2 K + sigma^2 I) x = b matrix-free under a precision policy.

    Builds the rank-``rank`` pivoted-Cholesky preconditioner (unless one is
    passed in) and honours the policy's downscale flag: the solver then works
    on the N^{-1/2}-scaled system, whose solution is unchanged, and the
    returned residual history is rescaled back to the unscaled system.
    """
    op = KernelOperator(spec, X, policy)
    if factor is None and rank > 0:
        factor = kernel_preconditioner(spec, X, rank)
    elif rank == 0 and factor is None:
        factor = None
    scale = op.input_scale
    fmt = policy.compute_format
    b = np.asarray(b, dtype=np.float64)
    if scale != 1.0:
        b_eff = np.asarray(quantize(np.asarray(quantize(b, fmt)) * scale, fmt))
        tol_eff = tolerance * scale
    else:
        b_eff = b
        tol_eff = tolerance
    cfg = CgConfig(tolerance=tol_eff, max_iters=max_iters,
                   compute_format=fmt, preconditioner=factor)
    run = cg_stable if stabilized else cg_standard
    report = run(op, b_eff, None, cfg)
    if scale != 1.0:
        if report.batched:
            hist = [[v / scale for v in h] for h in report.residual_history]
        else:
            hist = [v / scale for v in report.residual_history]
        report = replace(report, residual_history=hist, tolerance=tolerance)
    return report

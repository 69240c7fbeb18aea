"""Hyperparameter training through the detached-solve surrogate loss.

Each step solves the regularized kernel system against the centered targets
and a fresh set of Rademacher probe vectors in one batched CG call, detaches
those solutions, and assembles the surrogate gradient

    g(theta) = 1/(2M) sum_j u_j^T (dK/dtheta z_j) - 1/2 u_0^T (dK/dtheta u_0)

which equals the Hutchinson-estimated marginal-likelihood gradient when the
solves are exact.  Derivative products run through the same emulated MVM
machinery as the solves; the final scalar contractions are double precision.
Raw parameters live in log space and are updated with Adam; the noise stays
above a 1e-4 floor by projection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cg import CgConfig, cg_batched, cg_stable
from .formats import FP32, FloatFormat, get_format, quantize
from .kernels import KernelSpec, _as_points
from .mvm import KernelOperator, MvmPolicy, cross_mvm
from .precond import PivotedCholeskyFactor, kernel_preconditioner

__all__ = [
    "GpModel",
    "ProbeSet",
    "TrainConfig",
    "TrainTrace",
    "NonFinite",
    "pseudo_loss",
    "pseudo_loss_grad",
    "train",
    "predict",
]

NOISE_FLOOR = 1e-4


class NonFinite(FloatingPointError):
    """A gradient or parameter became non-finite in double precision."""


@dataclass
class GpModel:
    """Kernel hyperparameters in unconstrained (log) space plus a constant mean."""

    family: str
    raw_log_lengthscales: np.ndarray
    raw_log_outputscale_sq: float
    raw_log_noise_sq: float
    constant_mean: float = 0.0
    alpha: float = 2.0
    period: float = 1.0
    per_lengthscale: float = 1.0

    def __post_init__(self):
        self.raw_log_lengthscales = np.atleast_1d(
            np.asarray(self.raw_log_lengthscales, dtype=np.float64)
        )
        self.raw_log_noise_sq = max(self.raw_log_noise_sq, math.log(NOISE_FLOOR))

    @classmethod
    def initialized(cls, family: str, ard_dims: int | None = None,
                    lengthscale: float = 1.0, outputscale_sq: float = 1.0,
                    noise_sq: float = 2.0, constant_mean: float = 0.0,
                    **kw) -> "GpModel":
        nls = ard_dims if ard_dims else 1
        return cls(
            family=family,
            raw_log_lengthscales=np.full(nls, math.log(lengthscale)),
            raw_log_outputscale_sq=math.log(outputscale_sq),
            raw_log_noise_sq=math.log(noise_sq),
            constant_mean=constant_mean,
            **kw,
        )

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.raw_log_lengthscales)

    @property
    def outputscale_sq(self) -> float:
        return math.exp(self.raw_log_outputscale_sq)

    @property
    def noise_sq(self) -> float:
        return max(math.exp(self.raw_log_noise_sq), NOISE_FLOOR)

    @property
    def n_params(self) -> int:
        return self.raw_log_lengthscales.size + 2

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(
            family=self.family,
            lengthscales=tuple(self.lengthscales),
            outputscale_sq=self.outputscale_sq,
            noise_sq=self.noise_sq,
            alpha=self.alpha,
            period=self.period,
            per_lengthscale=self.per_lengthscale,
        )

    def raw_vector(self) -> np.ndarray:
        return np.concatenate([
            self.raw_log_lengthscales,
            [self.raw_log_outputscale_sq, self.raw_log_noise_sq],
        ])

    def with_raw_vector(self, v: np.ndarray) -> "GpModel":
        nls = self.raw_log_lengthscales.size
        return replace(
            self,
            raw_log_lengthscales=np.array(v[:nls]),
            raw_log_outputscale_sq=float(v[nls]),
            raw_log_noise_sq=max(float(v[nls + 1]), math.log(NOISE_FLOOR)),
        )

    def to_json(self, standardization: dict | None = None) -> str:
        payload = {
            "family": self.family,
            "raw_log_lengthscales": self.raw_log_lengthscales.tolist(),
            "raw_log_outputscale_sq": self.raw_log_outputscale_sq,
            "raw_log_noise_sq": self.raw_log_noise_sq,
            "constant_mean": self.constant_mean,
            "alpha": self.alpha,
            "period": self.period,
            "per_lengthscale": self.per_lengthscale,
        }
        if standardization is not None:
            payload["standardization"] = standardization
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "GpModel":
        d = json.loads(text)
        d.pop("standardization", None)
        d["raw_log_lengthscales"] = np.asarray(d["raw_log_lengthscales"])
        return cls(**d)


@dataclass(frozen=True)
class ProbeSet:
    """Rademacher probe vectors for the stochastic trace term."""

    Z: np.ndarray

    @property
    def m(self) -> int:
        return self.Z.shape[1]

    @classmethod
    def draw(cls, n: int, m: int, rng: np.random.Generator) -> "ProbeSet":
        return cls(Z=rng.integers(0, 2, size=(n, m)).astype(np.float64) * 2.0 - 1.0)


@dataclass
class TrainTrace:
    """Per-step hyperparameter values and optimization diagnostics."""

    noise_sq: list = field(default_factory=list)
    outputscale_sq: list = field(default_factory=list)
    mean_lengthscale: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_inf_norm: list = field(default_factory=list)
    cg_iterations: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)

    def append(self, model: GpModel, loss: float, grad: np.ndarray,
               cg_iters: int) -> None:
        self.noise_sq.append(model.noise_sq)
        self.outputscale_sq.append(model.outputscale_sq)
        self.mean_lengthscale.append(float(np.mean(model.lengthscales)))
        self.loss.append(loss)
        self.grad_inf_norm.append(float(np.max(np.abs(grad))))
        self.cg_iterations.append(int(cg_iters))

    def to_dict(self) -> dict:
        return {
            "noise_sq": self.noise_sq,
            "outputscale_sq": self.outputscale_sq,
            "mean_lengthscale": self.mean_lengthscale,
            "loss": self.loss,
            "grad_inf_norm": self.grad_inf_norm,
            "cg_iterations": self.cg_iterations,
        }


def _check_solves(X, y, probes: ProbeSet, solves) -> np.ndarray:
    solves = np.asarray(solves, dtype=np.float64)
    n = X.shape[0]
    if solves.shape != (n, probes.m + 1):
        raise ValueError(
            f"solves must be (N, M+1) = ({n}, {probes.m + 1}), "
            f"got {solves.shape}"
        )
    return solves


def pseudo_loss(model: GpModel, X, y, probes: ProbeSet, solves,
                policy: MvmPolicy) -> float:
    """Surrogate loss for detached solves [u0, u1..uM] against [y, Z].

    Its value is a diagnostic only; the object of interest is the gradient.
    MVMs run under the given policy; the two scalar reductions are double.
    """
    X = _as_points(X)
    U = _check_solves(X, y, probes, solves)
    op = KernelOperator(model.kernel_spec(), X, policy)
    u0 = U[:, 0]
    Z = probes.Z
    KZ = op.apply(Z) / op.input_scale
    Ku0 = op.apply(u0) / op.input_scale
    trace_term = float(np.sum(U[:, 1:] * KZ)) / (2.0 * probes.m)
    data_term = 0.5 * float(u0 @ Ku0)
    return trace_term - data_term


def pseudo_loss_grad(model: GpModel, X, y, probes: ProbeSet, solves,
                     policy: MvmPolicy) -> np.ndarray:
    """Gradient of the surrogate over raw parameters.

    Ordering matches ``GpModel.raw_vector()``: log-lengthscales (one entry,
    or one per dimension for ARD), then log outputscale^2, log noise^2.
    """
    X = _as_points(X)
    U = _check_solves(X, y, probes, solves)
    op = KernelOperator(model.kernel_spec(), X, policy)
    u0 = U[:, 0]
    Z = probes.Z
    m = probes.m
    W = np.concatenate([Z, u0[:, None]], axis=1)

    def contract(Y):
        # 1/(2M) sum_j u_j . Y_j  -  1/2 u_0 . Y_last, in double
        t = float(np.sum(U[:, 1:] * Y[:, :m])) / (2.0 * m)
        return t - 0.5 * float(u0 @ Y[:, m])

    nls = model.raw_log_lengthscales.size
    grad = np.empty(nls + 2)
    for t in range(nls):
        Y = op.apply_lengthscale_deriv(W, t if nls > 1 else None)
        grad[t] = contract(Y / op.input_scale)
    Y = op.apply_noise_free(W)
    grad[nls] = contract(Y / op.input_scale)
    s2 = model.noise_sq
    trace_term = float(np.sum(U[:, 1:] * Z)) / (2.0 * m)
    grad[nls + 1] = s2 * (trace_term - 0.5 * float(u0 @ u0))
    return grad


class _Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for a training run."""

    family: str = "rbf"
    steps: int = 50
    lr: float = 0.1
    probes: int = 8
    precond_rank: int = 15
    tolerance: float = 1.0
    max_iters: int = 50
    policy: MvmPolicy = field(default_factory=MvmPolicy)
    seed: int = 0
    ard: bool = False
    init_lengthscale: float = 1.0
    init_outputscale_sq: float = 1.0
    init_noise_sq: float = 2.0


def _solve_batch(spec: KernelSpec, X, B, policy: MvmPolicy, rank: int,
                 tolerance: float, max_iters: int):
    """Batched stable-CG solve of K~ U = B with the downscale bookkeeping."""
    op = KernelOperator(spec, X, policy)
    factor = kernel_preconditioner(spec, X, rank) if rank > 0 else None
    scale = op.input_scale
    fmt = policy.compute_format
    B = np.asarray(B, dtype=np.float64)
    if scale != 1.0:
        B_eff = np.asarray(quantize(np.asarray(quantize(B, fmt)) * scale, fmt))
        tol_eff = tolerance * scale
    else:
        B_eff = B
        tol_eff = tolerance
    cfg = CgConfig(tolerance=tol_eff, max_iters=max_iters, compute_format=fmt,
                   preconditioner=factor)
    report = cg_batched(op, B_eff, cfg)
    return report, B_eff, scale


def _loss_from_solve(report, B_eff, scale, m: int) -> float:
    """Surrogate-loss estimate from CG by-products (no extra MVM passes).

    Uses K~ u_j = (b_j + r_j)/scale with the final recurrence residuals, and
    the operator symmetry u_j.(K~ z_j) = z_j.(K~ u_j).
    """
    KU = (B_eff + report.final_residual) / scale
    U = report.solution
    z_dot = 0.0
    for j in range(1, m + 1):
        z_dot += float((B_eff[:, j] / scale) @ KU[:, j])
    trace = z_dot / (2.0 * m)
    data = 0.5 * float(U[:, 0] @ KU[:, 0])
    return trace - data


def train(X, y, config: TrainConfig):
    """Adam loop over the surrogate gradient; returns (model, trace).

    A CG breakdown aborts the step (no update) and halves the learning rate.
    Standardized inputs and targets are recommended.
    """
    X = _as_points(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != X.shape[0]:
        raise ValueError("y length must match X")
    rng = np.random.default_rng(config.seed)
    model = GpModel.initialized(
        config.family,
        ard_dims=X.shape[1] if config.ard else None,
        lengthscale=config.init_lengthscale,
        outputscale_sq=config.init_outputscale_sq,
        noise_sq=config.init_noise_sq,
        constant_mean=float(np.mean(y)),
    )
    trace = TrainTrace()
    opt = _Adam(config.lr)
    y_c = y - model.constant_mean

    for _ in range(config.steps):
        probes = ProbeSet.draw(X.shape[0], config.probes, rng)
        spec = model.kernel_spec()
        B = np.concatenate([y_c[:, None], probes.Z], axis=1)
        report, B_eff, scale = _solve_batch(
            spec, X, B, config.policy, config.precond_rank,
            config.tolerance, config.max_iters,
        )
        if any(s == "breakdown" for s in report.status):
            opt.lr *= 0.5
            continue
        solves = report.solution
        grad = pseudo_loss_grad(model, X, y, probes, solves, config.policy)
        if not np.all(np.isfinite(grad)):
            raise NonFinite("non-finite surrogate gradient")
        loss = _loss_from_solve(report, B_eff, scale, probes.m)
        model = model.with_raw_vector(opt.step(model.raw_vector(), grad))
        trace.append(model, loss, grad, max(report.iterations))
    return model, trace


def predict(model: GpModel, X_train, y, X_test, *, fmt="fp32",
            precond_rank: int = 15, tolerance: float = 0.01,
            max_iters: int = 200, batch: int = 64) -> dict:
    """GP predictive mean and variance with fp32 prediction MVMs by default.

    The mean cache v = K~^{-1}(y - mean) comes from a stable-CG solve; the
    variance column solves run batched.  Returns {"mean": ..., "variance": ...}.
    """
    fmt = get_format(fmt)
    X_train = _as_points(X_train)
    X_test = _as_points(X_test)
    y = np.asarray(y, dtype=np.float64).ravel()
    spec = model.kernel_spec()
    policy = MvmPolicy(compute_format=fmt)
    y_c = y - model.constant_mean

    report, _, scale = _solve_batch(spec, X_train, y_c[:, None], policy,
                                    precond_rank, tolerance, max_iters)
    if report.status[0] == "breakdown":
        raise NonFinite("prediction cache solve broke down")
    v = report.solution[:, 0]
    mean = cross_mvm(spec, X_test, X_train, v, policy) + model.constant_mean

    prior = model.outputscale_sq + model.noise_sq
    variance = np.empty(X_test.shape[0])
    from .kernels import kernel_rows

    for c0 in range(0, X_test.shape[0], batch):
        c1 = min(c0 + batch, X_test.shape[0])
        Kc = kernel_rows(spec, X_train, X_test[c0:c1], fmt)
        rep, B_eff, sc = _solve_batch(spec, X_train, Kc, policy,
                                      precond_rank, tolerance, max_iters)
        W = rep.solution
        variance[c0:c1] = prior - np.sum(Kc * W, axis=0)
    return {"mean": mean, "variance": variance}

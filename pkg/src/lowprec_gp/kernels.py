"""Stationary kernels evaluated under an emulated floating-point format.

A kernel "evaluated in fmt" quantizes every intermediate arithmetic result
into fmt (see ``_core_py`` for the normative operation sequence).  Input
coordinates and hyperparameters are ordinary doubles; hyperparameters are
rounded into fmt once when an evaluation is prepared, coordinates enter the
computation through the first arithmetic result (the coordinate difference).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import backend
from ._core_py import FAMILY_CODES
from .formats import FloatFormat, get_format, quantize

__all__ = [
    "KernelSpec",
    "SupportRadius",
    "DimensionMismatch",
    "UnsupportedFamily",
    "eval_kernel",
    "assemble_kernel_matrix",
    "support_mask",
    "max_representable_distance",
]

FAMILIES = tuple(FAMILY_CODES)


class DimensionMismatch(ValueError):
    """Input dimensionality does not match the kernel specification."""


class UnsupportedFamily(ValueError):
    """The requested operation has no closed form for this kernel family."""


@dataclass(frozen=True)
class KernelSpec:
    """A stationary kernel family with its hyperparameters.

    ``lengthscales`` is either a single shared value or one value per input
    dimension (ARD).  ``alpha`` applies to the rational quadratic family;
    ``period`` and ``per_lengthscale`` to the periodic family.
    """

    family: str
    lengthscales: tuple = (1.0,)
    outputscale_sq: float = 1.0
    noise_sq: float = 0.1
    alpha: float = 2.0
    period: float = 1.0
    per_lengthscale: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILY_CODES:
            raise UnsupportedFamily(
                f"unknown family {self.family!r}; expected one of {FAMILIES}"
            )
        ls = self.lengthscales
        if np.isscalar(ls):
            ls = (float(ls),)
        else:
            ls = tuple(float(v) for v in ls)
        object.__setattr__(self, "lengthscales", ls)
        for name in ("outputscale_sq", "noise_sq", "alpha", "period",
                     "per_lengthscale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if any(not v > 0 for v in ls):
            raise ValueError("lengthscales must be strictly positive")

    @property
    def ard(self) -> bool:
        return len(self.lengthscales) > 1

    def lengthscale_array(self, dim: int) -> np.ndarray:
        """Per-dimension lengthscales, broadcasting a shared value."""
        ls = np.asarray(self.lengthscales, dtype=np.float64)
        if ls.size == 1:
            return np.full(dim, ls[0])
        if ls.size != dim:
            raise DimensionMismatch(
                f"{ls.size} lengthscales for {dim}-dimensional inputs"
            )
        return ls

    def with_params(self, **kw) -> "KernelSpec":
        return replace(self, **kw)

    def to_json(self) -> str:
        payload = {
            "family": self.family,
            "lengthscales": list(self.lengthscales),
            "outputscale_sq": self.outputscale_sq,
            "noise_sq": self.noise_sq,
        }
        if self.family == "rq":
            payload["alpha"] = self.alpha
        if self.family == "periodic":
            payload["period"] = self.period
            payload["per_lengthscale"] = self.per_lengthscale
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "KernelSpec":
        d = json.loads(text)
        return cls(
            family=d["family"],
            lengthscales=tuple(d["lengthscales"]),
            outputscale_sq=d["outputscale_sq"],
            noise_sq=d["noise_sq"],
            alpha=d.get("alpha", 2.0),
            period=d.get("period", 1.0),
            per_lengthscale=d.get("per_lengthscale", 1.0),
        )


@dataclass(frozen=True)
class SupportRadius:
    """Distance at which a kernel first quantizes to zero in a format."""

    family: str
    lengthscale: float
    format: FloatFormat
    d_max: float


@dataclass(frozen=True)
class PreparedKernel:
    """Format-quantized hyperparameters and constants for the backend."""

    family_code: int
    ls_q: np.ndarray
    a2_q: float
    alpha: float
    consts: np.ndarray
    noise_q: float
    fmt: FloatFormat


def prepare_kernel(spec: KernelSpec, dim: int, fmt) -> PreparedKernel:
    """Quantize a kernel's hyperparameters into fmt for evaluation."""
    fmt = get_format(fmt)
    ls = spec.lengthscale_array(dim)
    ls_q = np.asarray(quantize(ls, fmt), dtype=np.float64)
    consts = np.zeros(4)
    if spec.family == "matern32":
        consts[0] = quantize(math.sqrt(3.0), fmt)
    elif spec.family == "matern52":
        consts[0] = quantize(math.sqrt(5.0), fmt)
        consts[1] = quantize(5.0 / 3.0, fmt)
    elif spec.family == "rq":
        consts[0] = quantize(2.0 * spec.alpha, fmt)
    elif spec.family == "periodic":
        consts[0] = quantize(math.pi / spec.period, fmt)
        consts[1] = quantize(2.0 / spec.per_lengthscale, fmt)
        consts[2] = quantize(2.0 * math.pi / spec.period, fmt)
        consts[3] = quantize(
            2.0 * math.pi / (spec.per_lengthscale * spec.period), fmt
        )
    return PreparedKernel(
        family_code=FAMILY_CODES[spec.family],
        ls_q=ls_q,
        a2_q=quantize(spec.outputscale_sq, fmt),
        alpha=spec.alpha,
        consts=consts,
        noise_q=quantize(spec.noise_sq, fmt),
        fmt=fmt,
    )


def _as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionMismatch("points must form an (N, D) array")
    return X


def kernel_rows(spec: KernelSpec, Xr, Xc, fmt, *, deriv_dim: int = -1) -> np.ndarray:
    """Quantized a^2*k(x, x') entries for all pairs Xr x Xc (noise excluded)."""
    Xr = _as_points(Xr)
    Xc = _as_points(Xc)
    if Xr.shape[1] != Xc.shape[1]:
        raise DimensionMismatch(
            f"point dimensions differ: {Xr.shape[1]} vs {Xc.shape[1]}"
        )
    p = prepare_kernel(spec, Xr.shape[1], fmt)
    return backend.kernel_tile(
        Xr, Xc, family=p.family_code, ls_q=p.ls_q, a2_q=p.a2_q, alpha=p.alpha,
        consts=p.consts, deriv_dim=deriv_dim, fmt=p.fmt,
    )


def eval_kernel(spec: KernelSpec, x, x_prime, fmt) -> float:
    """a^2 * k(x, x') quantized into fmt (noise not included)."""
    x = np.atleast_1d(np.asarray(x, np.float64))
    xp = np.atleast_1d(np.asarray(x_prime, np.float64))
    if x.shape != xp.shape or x.ndim != 1:
        raise DimensionMismatch(f"point shapes differ: {x.shape} vs {xp.shape}")
    return float(kernel_rows(spec, x[None, :], xp[None, :], fmt)[0, 0])


def assemble_kernel_matrix(spec: KernelSpec, X, fmt, with_noise: bool) -> np.ndarray:
    """Dense K (optionally + sigma^2 I), every entry quantized into fmt.

    Desk-scale only: materializes the N x N matrix.  Symmetry holds by
    construction because the entry arithmetic is sign-symmetric.
    """
    X = _as_points(X)
    fmt = get_format(fmt)
    n = X.shape[0]
    K = np.empty((n, n))
    chunk = 512
    for r0 in range(0, n, chunk):
        r1 = min(r0 + chunk, n)
        K[r0:r1] = kernel_rows(spec, X[r0:r1], X, fmt)
    if with_noise:
        noise_q = quantize(spec.noise_sq, fmt)
        d = np.arange(n)
        K[d, d] = quantize(K[d, d] + noise_q, fmt)
    return K


def support_mask(spec: KernelSpec, x_star, X, fmt) -> np.ndarray:
    """Indices i with a nonzero quantized kernel value against x_star."""
    X = _as_points(X)
    x_star = np.atleast_1d(np.asarray(x_star, np.float64))
    row = kernel_rows(spec, x_star[None, :], X, fmt)[0]
    return np.nonzero(row != 0.0)[0]


def max_representable_distance(family: str, lengthscale: float, fmt, *,
                               use_subnormal: bool = False,
                               alpha: float = 2.0, period: float = 1.0,
                               per_lengthscale: float = 1.0) -> SupportRadius:
    """Closed-form scaled distance at which k(d) first quantizes to zero.

    The cutoff threshold defaults to the format's smallest positive normal;
    ``use_subnormal`` switches to the smallest subnormal instead.  Matern-3/2
    and 5/2 have no closed form and raise ``UnsupportedFamily``.
    """
    fmt = get_format(fmt)
    if lengthscale <= 0:
        raise ValueError("lengthscale must be strictly positive")
    eps = fmt.min_positive_subnormal if use_subnormal else fmt.min_positive_normal
    log_eps = math.log(eps)
    if family == "matern12":
        d = -lengthscale * log_eps
    elif family == "rbf":
        d = lengthscale * math.sqrt(-2.0 * log_eps)
    elif family == "rq":
        d = lengthscale * math.sqrt(2.0 * alpha * (eps ** (-1.0 / alpha) - 1.0))
    elif family == "periodic":
        arg = -log_eps * per_lengthscale / 2.0
        if arg <= 1.0:
            d = (period / math.pi) * math.asin(math.sqrt(arg))
        else:
            d = math.inf
    elif family in ("matern32", "matern52"):
        raise UnsupportedFamily(
            f"no closed-form support radius for {family}"
        )
    else:
        raise UnsupportedFamily(f"unknown family {family!r}")
    return SupportRadius(family=family, lengthscale=lengthscale, format=fmt,
                         d_max=d)

"""Software-emulated floating-point formats and the signed log-scale primitive.

The toolkit never relies on hardware half-precision support: a format is a
description of its bit widths, and ``quantize`` rounds an ordinary double to
the nearest representable value of that format (round-to-nearest-even).
Everything downstream "computes in format F" by quantizing every elementary
arithmetic result into F the moment it is produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FloatFormat",
    "FP64",
    "FP32",
    "FP16",
    "BF16",
    "NAMED_FORMATS",
    "get_format",
    "format_constants",
    "quantize",
    "SignedLogValue",
    "lse_dot",
]


@dataclass(frozen=True)
class FloatFormat:
    """An IEEE-754-style binary floating point format given by its widths.

    Parameters
    ----------
    name : str
        Identifier used in CLI flags and reports.
    exponent_bits : int
        Width of the exponent field (>= 2).
    mantissa_bits : int
        Width of the stored fraction field (>= 1).
    supports_subnormals : bool
        When False, quantization flushes subnormal results to signed zero.
    sign_bits : int
        Always 1; kept explicit because it is part of the layout.
    """

    name: str
    exponent_bits: int
    mantissa_bits: int
    supports_subnormals: bool = True
    sign_bits: int = 1

    def __post_init__(self):
        if self.sign_bits != 1:
            raise ValueError("sign_bits must be 1")
        if self.exponent_bits < 2:
            raise ValueError("exponent_bits must be >= 2")
        if self.mantissa_bits < 1:
            raise ValueError("mantissa_bits must be >= 1")

    # Derived constants: pure functions of the field widths.

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def max_exponent(self) -> int:
        """Unbiased exponent of the largest finite binade."""
        return self.bias

    @property
    def min_exponent(self) -> int:
        """Unbiased exponent of the smallest normal binade."""
        return 1 - self.bias

    @property
    def max_finite(self) -> float:
        return (2.0 - 2.0 ** -self.mantissa_bits) * 2.0 ** self.max_exponent

    @property
    def min_positive_normal(self) -> float:
        return 2.0 ** self.min_exponent

    @property
    def min_positive_subnormal(self) -> float:
        return 2.0 ** (self.min_exponent - self.mantissa_bits)

    @property
    def smallest_positive(self) -> float:
        if self.supports_subnormals:
            return self.min_positive_subnormal
        return self.min_positive_normal

    @property
    def unit_roundoff(self) -> float:
        """Half the spacing of representable values in [1, 2)."""
        return 2.0 ** -(self.mantissa_bits + 1)

    @property
    def is_double(self) -> bool:
        return (
            self.exponent_bits == 11
            and self.mantissa_bits == 52
            and self.supports_subnormals
        )

    def __str__(self) -> str:
        return self.name


FP64 = FloatFormat("fp64", exponent_bits=11, mantissa_bits=52)
FP32 = FloatFormat("fp32", exponent_bits=8, mantissa_bits=23)
FP16 = FloatFormat("fp16", exponent_bits=5, mantissa_bits=10)
BF16 = FloatFormat("bf16", exponent_bits=8, mantissa_bits=7)

NAMED_FORMATS = {f.name: f for f in (FP64, FP32, FP16, BF16)}


def get_format(fmt) -> FloatFormat:
    """Resolve a format name ("fp64", "fp32", "fp16", "bf16") or pass through."""
    if isinstance(fmt, FloatFormat):
        return fmt
    try:
        return NAMED_FORMATS[str(fmt).lower()]
    except KeyError:
        raise ValueError(
            f"unknown format {fmt!r}; expected one of {sorted(NAMED_FORMATS)}"
        ) from None


def format_constants(fmt) -> dict:
    """Range and round-off constants of a format.

    Returns
    -------
    dict with ``max_finite``, ``min_positive_normal`` and ``unit_roundoff``.
    """
    fmt = get_format(fmt)
    return {
        "max_finite": fmt.max_finite,
        "min_positive_normal": fmt.min_positive_normal,
        "unit_roundoff": fmt.unit_roundoff,
    }


def _quantize_array(a: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Round every entry of a float64 array into ``fmt`` (RNE), vectorized."""
    finite = np.isfinite(a)
    # frexp: a = m * 2**e with |m| in [0.5, 1), so the leading bit sits at e-1.
    with np.errstate(invalid="ignore", over="ignore"):
        _, e = np.frexp(a)
        qexp = np.maximum(e - 1, fmt.min_exponent) - fmt.mantissa_bits
        scaled = np.ldexp(a, -qexp)  # exact: power-of-two scaling
        q = np.ldexp(np.rint(scaled), qexp)
        q = np.where(np.abs(q) > fmt.max_finite, np.copysign(np.inf, a), q)
        if not fmt.supports_subnormals:
            q = np.where(
                np.abs(q) < fmt.min_positive_normal, np.copysign(0.0, a), q
            )
    return np.where(finite, q, a)


def quantize(x, fmt):
    """Nearest representable value of ``x`` in ``fmt`` under round-to-nearest-even.

    Magnitudes beyond ``max_finite`` map to signed infinity; magnitudes below
    half the smallest subnormal map to signed zero.  NaN and infinities pass
    through unchanged.  Accepts scalars or arrays; always returns float64
    values (exactly representing members of ``fmt``).
    """
    fmt = get_format(fmt)
    a = np.asarray(x, dtype=np.float64)
    if fmt.is_double:
        return float(a) if a.ndim == 0 else a
    out = _quantize_array(a, fmt)
    return float(out) if out.ndim == 0 else out


_NEG_INF = float("-inf")


@dataclass(frozen=True)
class SignedLogValue:
    """A real number stored as (natural log of |value|, sign).

    A sign of 0 encodes an exact zero; its log magnitude is -inf.
    """

    log_magnitude: float
    sign: int

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ValueError("sign must be -1, 0 or +1")
        if self.sign == 0 and self.log_magnitude != _NEG_INF:
            raise ValueError("zero sign requires -inf log magnitude")

    @classmethod
    def zero(cls) -> "SignedLogValue":
        return cls(_NEG_INF, 0)

    def value(self) -> float:
        if self.sign == 0:
            return 0.0
        return self.sign * math.exp(self.log_magnitude)


def lse_dot(w, z) -> SignedLogValue:
    """Signed log of the dot product w^T z via the logsumexp transform.

    Terms are mapped to y_i = log|w_i| + log|z_i| with signs
    s_i = sign(w_i z_i); the largest y is factored out before summing so the
    result neither overflows nor underflows.  Exact-zero products are skipped;
    if every term is zero (or the signed sum cancels exactly) the result has
    sign 0.  All arithmetic is carried in double regardless of any ambient
    emulated format.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if w.shape != z.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {z.shape}")
    if w.size == 0:
        raise ValueError("lse_dot requires at least one element")
    if not (np.isfinite(w).all() and np.isfinite(z).all()):
        raise ValueError("lse_dot requires finite inputs")

    nz = (w != 0.0) & (z != 0.0)
    if not nz.any():
        return SignedLogValue.zero()
    y = np.log(np.abs(w[nz])) + np.log(np.abs(z[nz]))
    s = np.sign(w[nz]) * np.sign(z[nz])
    y_max = float(y.max())
    total = float(np.sum(s * np.exp(y - y_max)))
    if total == 0.0:
        return SignedLogValue.zero()
    return SignedLogValue(y_max + math.log(abs(total)), 1 if total > 0 else -1)

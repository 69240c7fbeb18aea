"""Selects the compiled extension core or the pure-NumPy fallback.

The compiled core (``lowprec_gp._core``, built from Cython) and the fallback
(``lowprec_gp._core_py``) implement the same operation sequences; the
compiled one is roughly an order of magnitude faster on the emulated-format
hot loops.  Selection happens at import; ``set_backend`` can override it
(used by tests and the backend benchmark).  Formats outside the four named
ones always take the fallback path, which quantizes generically.
"""

from __future__ import annotations

import os

import numpy as np

from . import _core_py
from .formats import BF16, FP16, FP32, FloatFormat

try:
    from . import _core  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False

_env = os.environ.get("LOWPREC_GP_BACKEND", "").strip().lower()
if _env == "python" or not HAVE_COMPILED:
    _active = "python"
else:
    _active = "compiled"


def backend_name() -> str:
    return _active


def set_backend(name: str) -> None:
    """Switch between "compiled" and "python" backends (global)."""
    global _active
    if name not in ("compiled", "python"):
        raise ValueError("backend must be 'compiled' or 'python'")
    if name == "compiled" and not HAVE_COMPILED:
        raise RuntimeError("compiled backend is not available")
    _active = name


def _fmt_code(fmt: FloatFormat):
    """Core format code, or None when only the generic path applies."""
    if not fmt.supports_subnormals:
        return None
    if fmt.is_double:
        return 0
    if fmt == FP32:
        return 1
    if fmt == FP16:
        return 2
    if fmt == BF16:
        return 3
    return None


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def mvm_kernel(Xr, Xc, V, *, family, ls_q, a2_q, alpha, consts, noise_q,
               deriv_dim, fmt, acc_mode, wide_fmt, block_size):
    fc = _fmt_code(fmt)
    wc = _fmt_code(wide_fmt)
    if _active == "compiled" and fc is not None and wc is not None:
        return _core.mvm_kernel(_c(Xr), _c(Xc), _c(V), family, _c(ls_q),
                                a2_q, alpha, _c(consts), noise_q, deriv_dim,
                                fc, acc_mode, wc, block_size)
    return _core_py.mvm_kernel(Xr, Xc, V, family, ls_q, a2_q, alpha, consts,
                               noise_q, deriv_dim, fmt, acc_mode, wide_fmt,
                               block_size)


def mvm_dense(M, V, *, fmt, acc_mode, wide_fmt, block_size):
    fc = _fmt_code(fmt)
    wc = _fmt_code(wide_fmt)
    if _active == "compiled" and fc is not None and wc is not None:
        return _core.mvm_dense(_c(M), _c(V), fc, acc_mode, wc, block_size)
    return _core_py.mvm_dense(M, V, fmt, acc_mode, wide_fmt, block_size)


def kernel_tile(Xr, Xc, *, family, ls_q, a2_q, alpha, consts, deriv_dim, fmt):
    fc = _fmt_code(fmt)
    if _active == "compiled" and fc is not None:
        return _core.kernel_tile(_c(Xr), _c(Xc), family, _c(ls_q), a2_q,
                                 alpha, _c(consts), deriv_dim, fc)
    return _core_py.kernel_tile(Xr, Xc, family, ls_q, a2_q, alpha, consts,
                                deriv_dim, fmt)


def dot_seq(a, b, fmt) -> float:
    fc = _fmt_code(fmt)
    if _active == "compiled" and fc is not None:
        return _core.dot_seq(_c(a), _c(b), fc)
    return _core_py.dot_seq(a, b, fmt)


def sum_seq(a, fmt) -> float:
    fc = _fmt_code(fmt)
    if _active == "compiled" and fc is not None:
        return _core.sum_seq(_c(a), fc)
    return _core_py.sum_seq(a, fmt)


def kahan_sum(a, fmt) -> float:
    fc = _fmt_code(fmt)
    if _active == "compiled" and fc is not None:
        return _core.kahan_sum(_c(a), fc)
    return _core_py.kahan_sum(a, fmt)

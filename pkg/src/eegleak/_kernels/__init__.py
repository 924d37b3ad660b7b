"""Hot kernels with a compiled backend and a numpy fallback.

The compiled module is used when it was built and ``EEGLEAK_PURE_PYTHON`` is
unset or ``0``.  ``BACKEND`` reports which one is active.
"""

from __future__ import annotations

import os

import numpy as np

from . import fallback

_FORCE_PURE = os.environ.get("EEGLEAK_PURE_PYTHON", "0") not in ("", "0")

_compiled = None
if not _FORCE_PURE:
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _impl(name: str, backend: str | None):
    backend = backend or BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return getattr(_compiled, name)
    if backend == "numpy":
        return getattr(fallback, name)
    raise ValueError(f"unknown backend {backend!r}")


def conv1d_forward(x, w, b, stride: int = 1, backend: str | None = None):
    return _impl("conv1d_forward", backend)(_f64(x), _f64(w), _f64(b), int(stride))


def conv1d_backward(x, w, dy, stride: int = 1, backend: str | None = None):
    return _impl("conv1d_backward", backend)(_f64(x), _f64(w), _f64(dy), int(stride))


def roc_auc_sorted(scores, labels, backend: str | None = None) -> float:
    return float(_impl("roc_auc_sorted", backend)(
        _f64(scores), np.ascontiguousarray(labels, dtype=np.int_)))


def sens_at_spec_sorted(scores, labels, spec_min: float, backend: str | None = None) -> float:
    return float(_impl("sens_at_spec_sorted", backend)(
        _f64(scores), np.ascontiguousarray(labels, dtype=np.int_), float(spec_min)))


__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_backward",
    "roc_auc_sorted",
    "sens_at_spec_sorted",
]

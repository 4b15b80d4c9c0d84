"""Backend selection for the separable solver kernels.

The compiled extension ``_ckernels`` is used when it imports; otherwise, or
when ``FEIOPT_PURE_PYTHON`` is set to a non-empty value other than ``0``,
the NumPy implementation in ``_pykernels`` is used.  Both expose the same
functions and agree to within round-off.
"""

from __future__ import annotations

import math
import os
from types import ModuleType

import numpy as np

from . import _pykernels


def _load_compiled() -> ModuleType | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
_force_py = os.environ.get("FEIOPT_PURE_PYTHON", "") not in ("", "0")

BACKEND = "cython" if (_compiled is not None and not _force_py) else "python"


def available_backends() -> list[str]:
    return ["cython", "python"] if _compiled is not None else ["python"]


def backend_module(name: str | None = None) -> ModuleType:
    name = name or BACKEND
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def solve_block(v, eta, c, k, l, u, cap, lo, hi, backend: str | None = None) -> tuple[np.ndarray, float]:
    """Separable block solve; see :func:`feiopt._pykernels.solve_block`.

    Returns ``(x, xi)``.
    """
    mod = backend_module(backend)
    v = _f64(v)
    out = np.empty_like(v)
    xi = mod.solve_block(v, float(eta), _f64(c), _f64(k), _f64(l), _f64(u), _f64(cap), float(lo), float(hi), out)
    return out, float(xi)


def project_ball(z, a, k, budget, backend: str | None = None) -> tuple[np.ndarray, float]:
    """Projection onto the energy ball; returns ``(w, multiplier)``."""
    mod = backend_module(backend)
    z = _f64(z)
    out = np.empty_like(z)
    if math.isinf(budget):
        return np.maximum(z, 0.0), 0.0
    lam = mod.project_ball(z, _f64(a), _f64(k), float(budget), out)
    return out, float(lam)


def minimize_scalar(v, eta, c, k, l, u, backend: str | None = None) -> np.ndarray:
    v, c, k, l, u = np.broadcast_arrays(*(_f64(t) for t in (v, c, k, l, u)))
    mod = backend_module(backend)
    if mod is _pykernels:
        return _pykernels.minimize_scalar(v, eta, c, k, l, u)
    out = np.empty(v.shape)
    mod.minimize_scalar_into(_f64(v), float(eta), _f64(c), _f64(k), _f64(l), _f64(u), out)
    return out

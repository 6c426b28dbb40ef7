"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension ``emac._kernels`` is used when it imports; otherwise,
or when ``EMAC_KERNELS=python`` is set, the numpy versions in
``emac._kernels_py`` are used. Both expose the same four functions.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("EMAC_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on build
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def backends() -> dict:
    """Available kernel modules keyed by name."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def warp_bilinear(field, flow) -> np.ndarray:
    return _impl.warp_bilinear(_f64(field), _f64(flow))


def warp_bilinear_adjoint(grad_out, flow) -> np.ndarray:
    return _impl.warp_bilinear_adjoint(_f64(grad_out), _f64(flow))


def blockmatch(cur, prev, block: int, radius: int, stride: int) -> np.ndarray:
    return _impl.blockmatch(_f64(cur), _f64(prev), int(block), int(radius), int(stride))


def rasterize(points, h: int, w: int, sigma: float, truncate: float) -> np.ndarray:
    pts = _f64(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    return _impl.rasterize(pts, int(h), int(w), float(sigma), float(truncate))

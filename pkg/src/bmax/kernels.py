"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``BMAX_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("BMAX_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def renyi2_logsum(means: np.ndarray, vars: np.ndarray) -> np.ndarray:
    means = np.ascontiguousarray(means, dtype=np.float64)
    vars = np.ascontiguousarray(vars, dtype=np.float64)
    if means.shape != vars.shape or means.ndim != 3:
        raise ValueError(f"expected matching (B, N, D) arrays, got {means.shape}, {vars.shape}")
    return _impl.renyi2_logsum(means, vars)


def pointmass_step(S, A, noise, **geom) -> np.ndarray:
    S = np.ascontiguousarray(S, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64)
    noise = np.ascontiguousarray(noise, dtype=np.float64)
    return _impl.pointmass_step(S, A, noise, geom["dt"], geom["drag"], geom["vmax"],
                                geom["x_lo"], geom["x_hi"], geom["y_lo"], geom["y_hi"],
                                geom["w_lo"], geom["w_hi"], geom["g_lo"], geom["g_hi"])

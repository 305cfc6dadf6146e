"""Backend selection for the fused MMD kernel.

The compiled extension ``fraug._mmd_core`` is used when it imports; otherwise
the numpy implementation in ``fraug._mmd_py`` takes over. Setting
``FRAUG_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from fraug import _mmd_py

BACKEND = "python"
_impl = _mmd_py.mmd_value_grad

if os.environ.get("FRAUG_PURE_PYTHON") != "1":
    try:
        from fraug import _mmd_core
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        _impl = _mmd_core.mmd_value_grad


def available_backends() -> dict:
    out = {"python": _mmd_py.mmd_value_grad}
    try:
        from fraug import _mmd_core
    except ImportError:
        pass
    else:
        out["compiled"] = _mmd_core.mmd_value_grad
    return out


def mmd_value_grad(x: np.ndarray, y: np.ndarray, coefs, need_grad: bool = True, backend: str | None = None):
    """Dispatch to the selected backend; inputs are promoted to float64."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.shape == y.shape and np.array_equal(x, y):
        # identical sample sets: the V-statistic is exactly zero and stationary
        return 0.0, (np.zeros_like(x) if need_grad else None), (np.zeros_like(y) if need_grad else None)
    impl = _impl if backend is None else available_backends()[backend]
    return impl(x, y, np.asarray(coefs, dtype=np.float64), need_grad)

"""Backend selection for the coordinate-descent kernels.

The compiled extension is preferred; the numpy fallback is used when the
extension is missing or when ``SPARSEINFER_BACKEND=python`` is set.  Both
expose ``lasso_cd`` and ``sqrt_lasso_cd`` with identical contracts.
"""

import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built on this install
    _compiled = None

if os.environ.get("SPARSEINFER_BACKEND", "").lower() == "python" or _compiled is None:
    _impl = _kernels_py
    BACKEND = "python"
else:
    _impl = _compiled
    BACKEND = "cython"

lasso_cd = _impl.lasso_cd
sqrt_lasso_cd = _impl.sqrt_lasso_cd


def available_backends():
    """Map backend name -> kernel module, for benchmarks and tests."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out

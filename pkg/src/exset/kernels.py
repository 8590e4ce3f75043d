"""Backend selection for the orthant-probability kernels.

The compiled extension is preferred; set ``EXSET_PURE_PYTHON=1`` to force
the numpy implementation (used by the benchmark and the parity tests).
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("EXSET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py
    else:
        BACKEND = "compiled"
else:
    _impl = _kernels_py

bvn_lower = _impl.bvn_lower
orthant_qmc = _impl.orthant_qmc

__all__ = ["BACKEND", "bvn_lower", "orthant_qmc"]

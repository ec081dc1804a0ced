"""Backend selection for the hot HMM recursion.

The compiled extension is used when it imports; otherwise the pure-Python
twin. Set ``MPCFOLIO_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py.forward_backward

if os.environ.get("MPCFOLIO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        _impl = _compiled.forward_backward


def forward_backward(log_b, trans, init):
    """Dispatch to the selected backend; see ``_kernels_py.forward_backward``."""
    return _impl(
        np.ascontiguousarray(log_b, dtype=np.float64),
        np.ascontiguousarray(trans, dtype=np.float64),
        np.ascontiguousarray(init, dtype=np.float64),
    )


def python_forward_backward(log_b, trans, init):
    return _kernels_py.forward_backward(log_b, trans, init)

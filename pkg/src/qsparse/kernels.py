"""Kernel backend selection.

The compiled extension is used when it was built; set ``QSPARSE_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active one.
"""
import os

from . import _kernels_py

_compiled = None
if os.environ.get("QSPARSE_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"

top_k_indices = _impl.top_k_indices
qsgd_round = _impl.qsgd_round
levels_round = _impl.levels_round
fwht = _impl.fwht


def backends():
    """Available backends by name; the fallback is always present."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out

"""Backend selection for the hot loops.

The compiled ``_kernels`` extension is used when it imports; otherwise the numpy
implementation in ``_pykernels`` is used.  Setting ``FPFUSE_PURE_PYTHON=1`` forces
the fallback.  ``BACKEND`` names the active choice.
"""

from __future__ import annotations

import os

from fpfuse import _pykernels

if os.environ.get("FPFUSE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from fpfuse import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

ins_span = _impl.ins_span
kf_update = _impl.kf_update
gauss_loglik = _impl.gauss_loglik


def backends():
    """Available backend modules keyed by name (the fallback is always present)."""
    out = {"python": _pykernels}
    try:
        from fpfuse import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out

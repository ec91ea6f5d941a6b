"""Kernel backend chosen at import: the compiled module when it was built,
otherwise numpy.  Set ``CUTPOINT_PURE_PYTHON=1`` to force numpy."""

from __future__ import annotations

import os

from . import _fallback

if os.environ.get("CUTPOINT_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _fallback

double_mac_sweep = _impl.double_mac_sweep
conv_accumulate = _impl.conv_accumulate
dw_accumulate = _impl.dw_accumulate

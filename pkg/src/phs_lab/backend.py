"""Selects the kernel implementation at import time.

The compiled extension is preferred when it imported cleanly; setting the
environment variable PHS_LAB_FORCE_NUMPY (to any nonempty value) pins the
pure-numpy route, which is also the fallback when the extension is missing.
"""

from __future__ import annotations

import os

from . import _kernels_np

_impl = _kernels_np
BACKEND = "numpy"

if not os.environ.get("PHS_LAB_FORCE_NUMPY"):
    try:
        from . import _kernels_cy as _compiled

        _impl = _compiled
        BACKEND = "cython"
    except ImportError:
        pass


def backend_name() -> str:
    return BACKEND


def pi_tensor(xa, xb, lengthscales):
    return _impl.pi_tensor(xa, xb, lengthscales)


def phs_cross(xa, xb, sa, sb, sf2, lengthscales):
    return _impl.phs_cross(xa, xb, sa, sb, sf2, lengthscales)

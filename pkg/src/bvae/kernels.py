"""Selects the im2col / col2im backend at import time.

The Cython extension ``bvae._ckernels`` is used when it was built.  Set
``BVAE_PURE_PYTHON=1`` to force the numpy fallback.  ``BACKEND`` names
the active one.
"""
import os

from . import _pykernels

if os.environ.get("BVAE_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "im2col", "col2im"]

"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``EXGEN_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

if os.environ.get("EXGEN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
crc64 = _impl.crc64

__all__ = ["BACKEND", "im2col", "col2im", "crc64"]

"""Convolution primitives: compiled core when available, numpy otherwise.

The backend is chosen once at import time.  Set ``MTSCONV_KERNELS`` to
``numpy`` or ``cython`` to force a choice; the default ``auto`` prefers
the compiled extension and silently falls back.  ``mtsconv bench``
compares the two.
"""

import os

from . import numpy_backend

_choice = os.environ.get("MTSCONV_KERNELS", "auto").lower()
if _choice not in ("auto", "cython", "numpy"):
    raise ValueError(f"MTSCONV_KERNELS must be auto, cython or numpy, got {_choice!r}")

_impl = None
if _choice in ("auto", "cython"):
    try:
        from . import _convcore as _impl
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "compiled convolution core requested but not built; "
                "run `python setup.py build_ext --inplace`"
            )

if _impl is None:
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    BACKEND = "cython"

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_kernels = _impl.conv2d_grad_kernels

__all__ = ["BACKEND", "conv2d_forward", "conv2d_grad_input", "conv2d_grad_kernels", "numpy_backend"]

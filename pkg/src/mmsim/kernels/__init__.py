"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled module is used when it was built and imports cleanly; set
``MMSIM_KERNELS=python`` to force the fallback or ``MMSIM_KERNELS=cython`` to
fail loudly when the extension is missing.
"""

import os

from . import _pykernels

_choice = os.environ.get("MMSIM_KERNELS", "auto").lower()
if _choice not in ("auto", "python", "cython"):
    raise ImportError(f"MMSIM_KERNELS must be auto, python or cython, got {_choice!r}")

_impl = _pykernels
if _choice != "python":
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _choice == "cython":
            raise
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
average_ranks = _impl.average_ranks

__all__ = [
    "BACKEND",
    "softmax_forward",
    "softmax_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
    "average_ranks",
]

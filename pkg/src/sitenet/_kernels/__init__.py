"""Backend selection for the convolution kernels.

The compiled Cython extension is used when importable; otherwise the NumPy
fallback takes over. Both produce bit-identical arrays, so backend choice
never changes results, only speed. Override with SITENET_KERNELS=python
(force fallback) or SITENET_KERNELS=compiled (fail if extension missing).
"""

import os

from . import numpy_backend

_requested = os.environ.get("SITENET_KERNELS", "auto")
if _requested not in ("auto", "python", "compiled"):
    raise ValueError(
        f"SITENET_KERNELS must be auto, python, or compiled, got {_requested!r}"
    )

if _requested == "python":
    _impl = numpy_backend
    BACKEND = "python"
else:
    try:
        from . import _convkern as _impl
        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = numpy_backend
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im

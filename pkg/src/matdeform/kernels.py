"""
Backend selection for the numerical hot loops.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``MATDEFORM_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

try:
    from . import _kernels_ext
except ImportError:  # extension not built
    _kernels_ext = None

BACKENDS = {"python": _kernels_py}
if _kernels_ext is not None:
    BACKENDS["cython"] = _kernels_ext

if _kernels_ext is None or os.environ.get("MATDEFORM_PURE_PYTHON", "") not in ("", "0"):
    BACKEND = "python"
else:
    BACKEND = "cython"

_impl = BACKENDS[BACKEND]
gaussian_kernel = _impl.gaussian_kernel
estep = _impl.estep
mixture_density = _impl.mixture_density

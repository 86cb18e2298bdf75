"""Voxel kernels with a numba fast path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``LESIONSYNTH_DISABLE_NUMBA`` is unset (or ``0``). Both backends are
importable directly as ``_kernels.numpy_backend`` / ``_kernels.numba_backend``
for testing and benchmarking.
"""
import os

from . import _numpy as numpy_backend

try:
    from . import _numba as numba_backend
except ImportError:  # numba not installed
    numba_backend = None

_disabled = os.environ.get("LESIONSYNTH_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

if numba_backend is not None and not _disabled:
    backend = numba_backend
    BACKEND_NAME = "numba"
else:
    backend = numpy_backend
    BACKEND_NAME = "numpy"

trilinear_sample = backend.trilinear_sample
nearest_sample = backend.nearest_sample
windowed_ssim = backend.windowed_ssim

__all__ = ["BACKEND_NAME", "numba_backend", "numpy_backend",
           "trilinear_sample", "nearest_sample", "windowed_ssim"]

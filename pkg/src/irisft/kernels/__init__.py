"""Convolution backend selection.

The environment variable ``IRISFT_BACKEND`` picks the implementation:

* ``numba`` -- numba-compiled direct convolutions (error if numba missing)
* ``numpy`` -- pure-numpy im2col + BLAS matmul
* ``auto`` or unset -- numba when it is importable and more than one CPU
  core is available, else numpy

The numba kernels parallelize across cores; on a single core the BLAS
path wins (see benchmarks/bench_backends.py), so ``auto`` only prefers
numba on multicore machines.  The variable is read once, at import time.
Both backends expose the same three functions; tests compare them against
each other and against finite differences.
"""

import os

_ENV_VAR = "IRISFT_BACKEND"
_requested = os.environ.get(_ENV_VAR, "auto").strip().lower()

if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"{_ENV_VAR}={_requested!r} not recognized; use auto, numba or numpy")


def _auto_wants_numba() -> bool:
    return (os.cpu_count() or 1) > 1


if _requested == "numba" or (_requested == "auto" and _auto_wants_numba()):
    try:
        from . import accelerated as _impl
        ACTIVE_BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import reference as _impl
        ACTIVE_BACKEND = "numpy"
else:
    from . import reference as _impl
    ACTIVE_BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_input_grad = _impl.conv2d_input_grad
conv2d_weight_grad = _impl.conv2d_weight_grad

__all__ = [
    "ACTIVE_BACKEND",
    "conv2d_forward",
    "conv2d_input_grad",
    "conv2d_weight_grad",
]

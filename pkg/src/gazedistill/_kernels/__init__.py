"""Hot-loop kernels with a compiled core and a NumPy fallback.

By default the compiled extension carries the kernels where per-window
loop overhead dominates (pooling, 1-d correlation) while the
convolutions stay on the NumPy im2col path, which rides BLAS and beats
the straight C loops at training sizes (see benchmarks/bench_kernels.py).
Set GAZEDISTILL_KERNELS=numpy|cython to force a single backend
(forcing cython without the extension present is an error).

Both backends expose the same functions and must agree numerically; they
are not required to agree bitwise (different summation orders).
"""

import os

from . import numpy_backend

_requested = os.environ.get("GAZEDISTILL_KERNELS", "").strip().lower()
if _requested not in ("", "numpy", "cython"):
    raise ValueError(
        f"GAZEDISTILL_KERNELS must be 'numpy' or 'cython', got {_requested!r}"
    )

_compiled = None
if _requested != "numpy":
    try:
        from . import cython_backend as _compiled
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "GAZEDISTILL_KERNELS=cython but the compiled backend is not built"
            )
        _compiled = None

if _requested == "cython":
    _conv = _pool = _compiled
elif _compiled is None or _requested == "numpy":
    _conv = _pool = numpy_backend
else:
    _conv = numpy_backend
    _pool = _compiled

BACKEND_NAME = _pool.NAME if _pool is _conv else f"{_pool.NAME}+{_conv.NAME}"

conv3x3_forward = _conv.conv3x3_forward
conv3x3_backward = _conv.conv3x3_backward
avgpool2d_forward = _pool.avgpool2d_forward
avgpool2d_backward = _pool.avgpool2d_backward
correlate1d = _pool.correlate1d

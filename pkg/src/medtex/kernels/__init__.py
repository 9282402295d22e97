"""Backend dispatch for the hot kernels.

The active backend is chosen once at import time from the MEDTEX_BACKEND
environment variable: ``numba`` (default when importable) or ``numpy``.
Both backends produce bit-identical results; the numba one is just faster.
Tests and benchmarks import the backend modules directly to compare them.
"""

import os

from ..errors import ValidationError
from . import numpy_backend

_requested = os.environ.get("MEDTEX_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ValidationError("kernels", "init",
                          f"MEDTEX_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numpy":
    _impl = numpy_backend
elif _requested == "numba":
    from . import numba_backend as _impl
else:
    try:
        from . import numba_backend as _impl
    except ImportError:
        _impl = numpy_backend

BACKEND = _impl.NAME

im2col_t = _impl.im2col_t
col2im_t = _impl.col2im_t
im2col_t_batch = _impl.im2col_t_batch
col2im_t_batch = _impl.col2im_t_batch
maxpool2x2 = _impl.maxpool2x2
maxpool2x2_backward = _impl.maxpool2x2_backward
sumpool = _impl.sumpool
sumpool_backward = _impl.sumpool_backward
upsample2x = _impl.upsample2x
upsample2x_backward = _impl.upsample2x_backward

"""Teacher-to-student distillation with a pixel-level explainer."""

import os as _os

# this package is CPU-bound numpy; oversubscribed BLAS pools on small
# cgroups slow the GEMMs down, so pin them to the cores we actually have
try:
    _cores = len(_os.sched_getaffinity(0))
except AttributeError:
    _cores = _os.cpu_count() or 1
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, str(_cores))

from .errors import MedtexError, ValidationError, FormatError, DivergenceError  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "MedtexError", "ValidationError", "FormatError", "DivergenceError",
    "__version__",
]

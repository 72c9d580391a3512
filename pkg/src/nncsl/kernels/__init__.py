"""Hot kernels for the soft nearest-neighbor classifier.

The compiled extension is used when it has been built; setting the
environment variable ``NNCSL_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from ._fallback import NORM_FLOOR, normalize_backward, row_normalize

BACKEND = "python"

if not os.environ.get("NNCSL_PURE_PYTHON"):
    try:
        from ._snn import snn_backward, snn_forward

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

if BACKEND == "python":
    from ._fallback import snn_backward, snn_forward

__all__ = [
    "BACKEND",
    "NORM_FLOOR",
    "normalize_backward",
    "row_normalize",
    "snn_backward",
    "snn_forward",
]

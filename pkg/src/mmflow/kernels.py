"""Geometry kernels behind the synthetic-study metrics.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``MMFLOW_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MMFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

point_triangle_distances = _impl.point_triangle_distances
min_distances = _impl.min_distances
mean_pairwise_distance = _impl.mean_pairwise_distance

__all__ = ["BACKEND", "point_triangle_distances", "min_distances", "mean_pairwise_distance"]

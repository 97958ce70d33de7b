"""Backend selection for the nearest-neighbor hot loop.

The compiled Cython kernel is used when available; setting the
``HOIRECON_PURE_PY`` environment variable (to anything non-empty) forces
the pure-numpy fallback. Both backends are bit-identical; see
``benchmarks/bench_kernels.py`` for a speed comparison.
"""

import os

from . import _kernels_py

if os.environ.get("HOIRECON_PURE_PY"):
    _backend = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _backend  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _backend = _kernels_py
        BACKEND = "python"


def nn_batch(points, queries):
    """Nearest (index, squared distance) in `points` for each query row.

    Ties break to the lowest point index.
    """
    return _backend.nn_batch(points, queries)

"""Backend selection for the pairwise geometry kernels.

Prefers the compiled extension (graphmot._native) and falls back to the
NumPy implementations when it is not built. Set GRAPHMOT_NO_NATIVE=1 to
force the fallback, e.g. for benchmarking (benchmarks/bench_kernels.py).
"""

import os

from . import _kernels_py

if os.environ.get("GRAPHMOT_NO_NATIVE"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

iou_matrix = _impl.iou_matrix
center_dist_matrix = _impl.center_dist_matrix
feature_dist_matrix = _impl.feature_dist_matrix

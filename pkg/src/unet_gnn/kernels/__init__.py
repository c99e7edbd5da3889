"""Hot numeric kernels, dispatched to numba or numpy per ``unet_gnn._backend``.

Both implementations stay importable (``numpy_impl``, ``numba_impl``) so the
test suite and the benchmark can cross-check them regardless of the flag.
"""
from . import _numpy as numpy_impl
from .._backend import BACKEND, HAVE_NUMBA

if HAVE_NUMBA:
    from . import _numba as numba_impl
else:  # pragma: no cover
    numba_impl = None

KERNEL_NAMES = (
    "im2col",
    "col2im",
    "maxpool2_forward",
    "maxpool2_backward",
    "neighbor_sum",
    "neighbor_sum_transpose",
    "knn_select",
    "confusion_tally",
)

_active = numba_impl if BACKEND == "numba" else numpy_impl

# im2col is a pure gather; numpy's strided copy beats the compiled loop
# (see benchmarks/bench_kernels.py), so it stays on numpy under both flags.
NUMPY_ONLY = frozenset({"im2col"})

im2col = numpy_impl.im2col
col2im = _active.col2im
maxpool2_forward = _active.maxpool2_forward
maxpool2_backward = _active.maxpool2_backward
neighbor_sum = _active.neighbor_sum
neighbor_sum_transpose = _active.neighbor_sum_transpose
knn_select = _active.knn_select
confusion_tally = _active.confusion_tally

__all__ = ["BACKEND", "KERNEL_NAMES", "numpy_impl", "numba_impl", *KERNEL_NAMES]

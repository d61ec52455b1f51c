"""Real-time CPU stereo depth, sliding-window depth-map fusion and evaluation."""

import os

import numba

# numba's default layer probes TBB first; the pipeline calls kernels from two
# threads at once, which the workqueue fallback cannot handle.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

__version__ = "0.1.0"

"""Numba thread-pool setup; imported before anything else touches numba."""

import os
import sys

if "numba" not in sys.modules:
    # allow up to 8 workers even on small machines; the active count still
    # defaults to the core count
    os.environ.setdefault("NUMBA_NUM_THREADS", str(max(os.cpu_count() or 1, 8)))

import numba  # noqa: E402

numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
numba.set_num_threads(min(os.cpu_count() or 1, numba.config.NUMBA_NUM_THREADS))

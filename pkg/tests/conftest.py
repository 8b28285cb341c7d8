"""Shared test configuration.

BLAS threading is pinned to one thread before numpy loads: the work
arrays here are tiny, thread fan-out only adds latency, and single
threading keeps timing-sensitive tests stable.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

"""Pointer-addressed autoregressive world model over a synthetic micro-world."""

import ctypes
import ctypes.util

__version__ = "0.1.0"


def _tune_allocator():
    # Keep multi-MB numpy temporaries on the heap instead of fresh mmaps;
    # page-fault churn otherwise dominates the training loops.
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
        libc.mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024)
        libc.mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024)
    except Exception:
        pass


_tune_allocator()

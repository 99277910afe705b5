"""Allocator tuning for long CPU training runs.

glibc raises its mmap threshold after large frees, so the many transient
activation buffers of a training loop end up on the heap and are never
returned to the OS. Pinning the threshold at 1 MiB keeps resident memory
close to the live working set.
"""

import ctypes
import sys

_M_MMAP_THRESHOLD = -3


def limit_heap_growth(threshold: int = 1 << 20) -> bool:
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
        return bool(libc.mallopt(_M_MMAP_THRESHOLD, threshold))
    except (OSError, AttributeError):
        return False

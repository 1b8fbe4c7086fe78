"""Compiled inner loops for flip-mask generation.

Computes exactly what ``ChipField.uniform() <= p`` followed by bit packing
computes, without materializing the ``W x m`` field.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _mix(x):
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


@njit(cache=True)
def flip_masks(base, W, m, thresholds):
    """``out[k, i]`` has bit ``j`` set iff ``top53(u64(i*8 + j)) <= thresholds[k]``."""
    out = np.zeros((thresholds.size, W), dtype=np.uint8)
    for i in range(W):
        for j in range(m):
            counter = np.uint64(i * 8 + j + 1)
            v = _mix(base + counter * _GOLDEN) >> np.uint64(11)
            for k in range(thresholds.size):
                if v <= thresholds[k]:
                    out[k, i] |= np.uint8(1 << j)
    return out

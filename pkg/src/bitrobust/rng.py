"""Counter-based random numbers keyed on 64-bit seeds.

Every value is a pure function of ``(key, counter)``: the SplitMix64 output
function applied to ``mix(key) + (counter + 1) * GOLDEN``.  Nothing is carried
between calls, so evaluation order and chunking cannot change results.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

# domain separators so different consumers of one master seed never collide
DOMAIN_CHIPS = 0x43484950_5F50414E  # "CHIP_PAN"
DOMAIN_STREAM = 0x54524149_4E5F5354  # "TRAIN_ST"
DOMAIN_PROFILE = 0x50524F46_494C4544  # "PROFILED"

_U53 = 1.0 / (1 << 53)


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(_M1)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(_M2)
    return x ^ (x >> np.uint64(31))


def random_u64(key: int, counters) -> np.ndarray:
    """64-bit words for each counter under ``key``."""
    counters = np.asarray(counters, dtype=np.uint64)
    base = np.uint64(mix64(key))
    with np.errstate(over="ignore"):
        state = base + (counters + np.uint64(1)) * np.uint64(GOLDEN)
        return _mix64_array(state)


def random_uniform(key: int, counters) -> np.ndarray:
    """Uniform doubles in [0, 1) built from the top 53 bits."""
    return (random_u64(key, counters) >> np.uint64(11)).astype(np.float64) * _U53


def derive_seed(key: int, index: int, domain: int = 0) -> int:
    """Child seed number ``index`` of ``key``; scalar, exact integer path."""
    base = mix64((key ^ domain) & MASK64)
    return mix64(base + (index + 1) * GOLDEN)

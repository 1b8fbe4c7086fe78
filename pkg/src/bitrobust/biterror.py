"""Bit error injection into quantized weight codes.

Random errors follow a per-chip uniform field ``u[i, j]`` over weight ``i`` and
stored bit ``j`` (``j = 0`` is the LSB).  Bit ``j`` of weight ``i`` is flipped at
rate ``p`` iff ``u[i, j] <= p``, which makes the error set at a lower rate a
subset of the error set at a higher rate for the same chip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .fixedpoint import QuantizedTensor, check_groups

# counter stride per weight; fixed at 8 so u(i, j) does not depend on m
BIT_STRIDE = 8


@dataclass(frozen=True)
class ChipField:
    """Lazily realized uniform field ``u in [0, 1)^(W x m)`` of one chip."""

    chip_seed: int
    W: int
    m: int

    def uniform(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """``u[i, j]`` for weights ``start <= i < stop``, shape ``(n, m)``."""
        stop = self.W if stop is None else stop
        i = np.arange(start, stop, dtype=np.uint64)[:, None]
        j = np.arange(self.m, dtype=np.uint64)[None, :]
        return rng.random_uniform(self.chip_seed, i * np.uint64(BIT_STRIDE) + j)

    def flip_mask(self, p: float) -> np.ndarray:
        """Per-weight uint8 mask with bit ``j`` set iff ``u[i, j] <= p``."""
        return self.flip_masks([p])[0]

    def flip_masks(self, ps) -> list[np.ndarray]:
        """Masks for several rates from a single pass over the field."""
        from . import _kernels  # deferred: numba is slow to import

        # u = top53 * 2**-53 exactly, so u <= p iff top53 <= floor(p * 2**53)
        thresholds = np.array([math.floor(_check_rate(p) * 2.0 ** 53) for p in ps], dtype=np.uint64)
        out = _kernels.flip_masks(np.uint64(rng.mix64(self.chip_seed)), self.W, self.m, thresholds)
        return list(out)


def _check_rate(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"bit error rate must be in [0, 1], got {p}")
    return float(p)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean ``(n, m)`` array LSB-first into uint8 words."""
    weights = (1 << np.arange(bits.shape[1], dtype=np.uint16)).astype(np.uint8)
    return (bits.astype(np.uint8) * weights).sum(axis=1, dtype=np.uint8)


_POPCOUNT = np.array([bin(b).count("1") for b in range(256)], dtype=np.int64)


def popcount(words: np.ndarray) -> int:
    return int(_POPCOUNT[np.asarray(words, dtype=np.uint8)].sum())


@dataclass(frozen=True)
class InjectionReport:
    flipped_bits: int
    expected_flips: float
    affected_weights: int

    def __str__(self):
        return (
            f"flipped_bits={self.flipped_bits} expected_flips={self.expected_flips:.6g} "
            f"affected_weights={self.affected_weights}"
        )


def expected_flips(p: float, m: int, W: int) -> float:
    """Expected number of random bit errors, ``p * m * W``."""
    return p * m * W


def apply_mask(q: QuantizedTensor, mask: np.ndarray, p: float = 0.0) -> tuple[QuantizedTensor, InjectionReport]:
    mask = np.asarray(mask, dtype=np.uint8) & np.uint8(q.scheme.mask)
    report = InjectionReport(
        flipped_bits=popcount(mask),
        expected_flips=expected_flips(p, q.scheme.m, q.size),
        affected_weights=int(np.count_nonzero(mask)),
    )
    return q.with_codes(q.codes ^ mask), report


def inject_random(q: QuantizedTensor, chip: ChipField, p: float) -> tuple[QuantizedTensor, InjectionReport]:
    """Flip the stored bits selected by ``chip`` at rate ``p``; ``q`` is not modified."""
    if chip.W != q.size or chip.m != q.scheme.m:
        raise ValueError(f"chip is {chip.W}x{chip.m} but codes are {q.size}x{q.scheme.m}")
    return apply_mask(q, chip.flip_mask(p), p)


def sample_chips(master_seed: int, count: int, W: int, m: int) -> list[ChipField]:
    """A fixed panel of ``count`` chips; chip ``c`` depends only on ``(master_seed, c)``."""
    if count < 1:
        raise ValueError("need at least one chip")
    return [ChipField(rng.derive_seed(master_seed, c, rng.DOMAIN_CHIPS), W, m) for c in range(count)]


class ErrorStream:
    """Fresh chip per training step, reproducible from one seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self.step = 0

    def next_chip(self, W: int, m: int) -> ChipField:
        chip = ChipField(rng.derive_seed(self.seed, self.step, rng.DOMAIN_STREAM), W, m)
        self.step += 1
        return chip


@dataclass
class ProfiledMap:
    """Measured per-cell flip probabilities of a memory array (row-major cells)."""

    rows: int
    cols: int
    p01: np.ndarray
    p10: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.p01 = np.asarray(self.p01, dtype=np.float64).ravel()
        self.p10 = np.asarray(self.p10, dtype=np.float64).ravel()
        n = self.rows * self.cols
        if self.rows < 1 or self.cols < 1:
            raise ValueError("map geometry must be positive")
        if self.p01.size != n or self.p10.size != n:
            raise ValueError(f"expected {n} cells, got {self.p01.size}/{self.p10.size}")
        for name, arr in (("p01", self.p01), ("p10", self.p10)):
            if np.isnan(arr).any():
                raise ValueError(f"{name} contains NaN")
            if (arr < 0).any() or (arr > 1).any():
                raise ValueError(f"{name} probabilities must lie in [0, 1]")

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    @classmethod
    def load(cls, path) -> "ProfiledMap":
        """Read the text format: ``rows cols`` then one ``p01 p10`` line per cell."""
        path = Path(path)
        lines = [
            ln.strip()
            for ln in path.read_text(encoding="utf-8").splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")
        ]
        if not lines:
            raise ValueError(f"{path}: empty map file")
        try:
            rows, cols = (int(t) for t in lines[0].split())
            values = np.array([[float(t) for t in ln.split()] for ln in lines[1:]], dtype=np.float64)
        except ValueError as exc:
            raise ValueError(f"{path}: malformed map file ({exc})") from None
        if values.ndim != 2 or values.shape != (rows * cols, 2):
            raise ValueError(f"{path}: expected {rows * cols} lines of 'p01 p10'")
        return cls(rows, cols, values[:, 0], values[:, 1], label=path.stem)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if self.label:
                fh.write(f"# {self.label}\n")
            fh.write(f"{self.rows} {self.cols}\n")
            for a, b in zip(self.p01, self.p10):
                fh.write(f"{float(a)!r} {float(b)!r}\n")


def _cell_layout(q: QuantizedTensor, pmap: ProfiledMap, offset: int):
    if not 0 <= offset < pmap.cells:
        raise ValueError(f"offset {offset} outside [0, {pmap.cells})")
    m = q.scheme.m
    i = np.arange(q.size, dtype=np.int64)[:, None]
    j = np.arange(m, dtype=np.int64)[None, :]
    cell = (offset + i * m + j) % pmap.cells
    bit = (q.codes[:, None] >> j.astype(np.uint8)) & 1
    prob = np.where(bit == 1, pmap.p10[cell], pmap.p01[cell])
    return cell, prob


def profiled_mask(q: QuantizedTensor, pmap: ProfiledMap, offset: int, sample_seed: int) -> np.ndarray:
    """Flip mask from replaying ``pmap`` with weights laid out linearly from ``offset``.

    Bit ``j`` of weight ``i`` lives in cell ``(offset + i*m + j) mod cells``.
    Each cell draws one uniform value from ``sample_seed``, so fractional
    probabilities describe one fixed chip instance.
    """
    cell, prob = _cell_layout(q, pmap, offset)
    u = rng.random_uniform(rng.derive_seed(sample_seed, 0, rng.DOMAIN_PROFILE), cell.astype(np.uint64))
    return pack_bits(u < prob)


def profiled_expected_flips(q: QuantizedTensor, pmap: ProfiledMap, offset: int) -> float:
    """Sum of the flip probabilities of every stored bit under the mapping."""
    return float(_cell_layout(q, pmap, offset)[1].sum())


def inject_profiled(q: QuantizedTensor, pmap: ProfiledMap, offset: int, sample_seed: int) -> QuantizedTensor:
    out, _ = apply_mask(q, profiled_mask(q, pmap, offset, sample_seed))
    return out


def inject_linf(weights, groups, eps_rel: float, seed: int) -> np.ndarray:
    """Uniform noise in ``[-eps_rel * R, eps_rel * R]`` per group, ``R`` the group's range."""
    if eps_rel < 0:
        raise ValueError("eps_rel must be non-negative")
    w = np.asarray(weights, dtype=np.float64)
    flat = w.ravel().copy()
    gen = np.random.default_rng(seed)
    for start, end in check_groups(groups, flat.size):
        r = float(flat[start:end].max() - flat[start:end].min())
        flat[start:end] += gen.uniform(-1.0, 1.0, end - start) * (eps_rel * r)
    return flat.reshape(w.shape)


def binomial_tolerance(p: float, m: int, W: int, sigmas: float = 4.0) -> float:
    return sigmas * math.sqrt(p * (1 - p) * m * W)

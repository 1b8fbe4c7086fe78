"""Fixed-point weight quantization into 8-bit code words.

Weights are split into groups (weights and biases of each layer separately).
A group is mapped to ``m``-bit integers stored in the low bits of a uint8; the
remaining ``8 - m`` high bits are always zero after quantization so that bit
errors only ever touch the ``m`` stored bits.

Two families of schemes are supported:

* symmetric ranges ``[-qmax, qmax]`` with signed two's-complement codes,
  ``v = floor(w / delta)`` or ``round(w / delta)``, ``delta = qmax / (2**(m-1) - 1)``;
* asymmetric ranges ``[qmin, qmax]``: weights are remapped linearly onto
  ``[-1, 1]`` first and then quantized with ``qmax = 1``, either into signed
  two's complement or into unsigned integers offset by ``2**(m-1) - 1``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_EPS = 2.0 ** -24
# floor() guard: dequantized grid points k*delta must re-floor to k
_FLOOR_GUARD = 1e-9


class Granularity(enum.IntEnum):
    GLOBAL = 0
    PER_GROUP = 1


class RangeMode(enum.IntEnum):
    SYMMETRIC = 0
    ASYMMETRIC = 1


class IntegerRepr(enum.IntEnum):
    SIGNED = 0
    UNSIGNED = 1


class Rounding(enum.IntEnum):
    TRUNCATE = 0
    NEAREST = 1


@dataclass(frozen=True)
class QuantScheme:
    """One quantization variant; see ``NORMAL`` and ``RQUANT`` for the presets."""

    m: int = 8
    granularity: Granularity = Granularity.PER_GROUP
    range_mode: RangeMode = RangeMode.ASYMMETRIC
    integer_repr: IntegerRepr = IntegerRepr.UNSIGNED
    rounding: Rounding = Rounding.NEAREST

    def __post_init__(self):
        if not 2 <= int(self.m) <= 8:
            raise ValueError(f"precision m must be in [2, 8], got {self.m}")
        # coerce plain ints/strings so the dataclass compares equal either way
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        object.__setattr__(self, "range_mode", RangeMode(self.range_mode))
        object.__setattr__(self, "integer_repr", IntegerRepr(self.integer_repr))
        object.__setattr__(self, "rounding", Rounding(self.rounding))
        if self.range_mode == RangeMode.SYMMETRIC and self.integer_repr == IntegerRepr.UNSIGNED:
            raise ValueError("unsigned codes require an asymmetric range")

    @property
    def levels(self) -> int:
        """Largest positive signed level, ``2**(m-1) - 1``."""
        return (1 << (self.m - 1)) - 1

    @property
    def mask(self) -> int:
        """Bit mask of the ``m`` stored bits."""
        return (1 << self.m) - 1

    def replace(self, **changes) -> "QuantScheme":
        values = dict(
            m=self.m,
            granularity=self.granularity,
            range_mode=self.range_mode,
            integer_repr=self.integer_repr,
            rounding=self.rounding,
        )
        values.update(changes)
        return QuantScheme(**values)


NORMAL = QuantScheme(8, Granularity.PER_GROUP, RangeMode.SYMMETRIC, IntegerRepr.SIGNED, Rounding.TRUNCATE)
RQUANT = QuantScheme(8, Granularity.PER_GROUP, RangeMode.ASYMMETRIC, IntegerRepr.UNSIGNED, Rounding.NEAREST)


@dataclass(frozen=True)
class QuantParams:
    """Fitted range of one group.  ``delta`` is the integer step of the code grid."""

    qmin: float
    qmax: float
    delta: float

    @classmethod
    def for_range(cls, qmin: float, qmax: float, scheme: QuantScheme) -> "QuantParams":
        qmin, qmax = float(qmin), float(qmax)
        if not qmin < qmax:
            raise ValueError(f"empty quantization range [{qmin}, {qmax}]")
        if scheme.range_mode == RangeMode.SYMMETRIC:
            if qmin != -qmax:
                raise ValueError("symmetric range requires qmin == -qmax")
            delta = qmax / scheme.levels
        else:
            delta = 1.0 / scheme.levels
        return cls(qmin, qmax, delta)

    def step(self, scheme: QuantScheme) -> float:
        """Quantization step in weight units."""
        if scheme.range_mode == RangeMode.SYMMETRIC:
            return self.delta
        return self.delta * (self.qmax - self.qmin) / 2.0


Groups = list  # list of (start, end) index pairs


def check_groups(groups, size: int) -> list[tuple[int, int]]:
    out = []
    for k, (start, end) in enumerate(groups):
        start, end = int(start), int(end)
        if not 0 <= start < end <= size:
            raise ValueError(f"group {k} = [{start}, {end}) is empty or out of bounds for {size} weights")
        out.append((start, end))
    return out


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    params: list[QuantParams]
    scheme: QuantScheme
    groups: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        if len(self.params) != len(self.groups):
            raise ValueError("one QuantParams per group required")

    @property
    def size(self) -> int:
        return int(self.codes.size)

    def with_codes(self, codes: np.ndarray) -> "QuantizedTensor":
        return QuantizedTensor(codes, list(self.params), self.scheme, list(self.groups))

    def to_bytes(self) -> bytes:
        s = self.scheme
        header = b"BQT1" + struct.pack(
            "<BBBBI",
            s.m,
            int(s.granularity),
            int(s.range_mode),
            int(s.integer_repr) | (int(s.rounding) << 4),
            len(self.groups),
        )
        body = b"".join(
            struct.pack("<ddqq", p.qmin, p.qmax, start, end)
            for p, (start, end) in zip(self.params, self.groups)
        )
        return header + body + self.codes.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["QuantizedTensor", int]:
        """Parse one record starting at ``offset``; returns it and the end offset."""
        if data[offset:offset + 4] != b"BQT1":
            raise ValueError("not a BQT1 record (bad magic)")
        pos = offset + 4
        try:
            m, gran, rng, packed, n_groups = struct.unpack_from("<BBBBI", data, pos)
            pos += 8
            scheme = QuantScheme(m, gran, rng, packed & 0x0F, packed >> 4)
            params, groups = [], []
            for _ in range(n_groups):
                qmin, qmax, start, end = struct.unpack_from("<ddqq", data, pos)
                pos += 32
                params.append(QuantParams.for_range(qmin, qmax, scheme))
                groups.append((int(start), int(end)))
        except struct.error as exc:
            raise ValueError(f"truncated BQT1 record: {exc}") from None
        size = max((end for _, end in groups), default=0)
        if len(data) < pos + size:
            raise ValueError("truncated BQT1 record: missing code bytes")
        codes = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos).copy()
        check_groups(groups, size)
        return cls(codes, params, scheme, groups), pos + size


def _half_width(values: np.ndarray) -> float:
    return max(float(np.max(np.abs(values))), DEGENERATE_EPS)


def fit_range(weights, groups, scheme: QuantScheme) -> list[QuantParams]:
    """Fit one ``QuantParams`` per group.

    With global granularity all groups share a single range fitted over the
    union of the groups.  Non-finite weights are rejected, naming the group.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    groups = check_groups(groups, w.size)
    if not groups:
        raise ValueError("at least one group required")
    for k, (start, end) in enumerate(groups):
        if not np.all(np.isfinite(w[start:end])):
            raise ValueError(f"group {k} = [{start}, {end}) contains non-finite weights")

    def fit(values: np.ndarray) -> QuantParams:
        lo, hi = float(values.min()), float(values.max())
        if scheme.range_mode == RangeMode.SYMMETRIC or lo == hi:
            # all-equal groups get an artificial symmetric half-width
            h = _half_width(values)
            if scheme.range_mode == RangeMode.SYMMETRIC:
                return QuantParams.for_range(-h, h, scheme)
            return QuantParams.for_range(lo - h, hi + h, scheme)
        return QuantParams.for_range(lo, hi, scheme)

    if scheme.granularity == Granularity.GLOBAL:
        shared = fit(np.concatenate([w[s:e] for s, e in groups]))
        return [shared] * len(groups)
    return [fit(w[s:e]) for s, e in groups]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_levels(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    if scheme.rounding == Rounding.NEAREST:
        v = round_half_away(x)
    else:
        v = np.floor(x + _FLOOR_GUARD)
    return np.clip(v, -scheme.levels, scheme.levels).astype(np.int64)


def normalize(w: np.ndarray, params: QuantParams) -> np.ndarray:
    """Linear map of ``[qmin, qmax]`` onto ``[-1, 1]``."""
    return (w - params.qmin) / (params.qmax - params.qmin) * 2.0 - 1.0


def denormalize(n: np.ndarray, params: QuantParams) -> np.ndarray:
    return (n + 1.0) / 2.0 * (params.qmax - params.qmin) + params.qmin


def quantize_group(w: np.ndarray, params: QuantParams, scheme: QuantScheme) -> np.ndarray:
    """Codes (uint8, high bits zero) for one group."""
    w = np.clip(np.asarray(w, dtype=np.float64), params.qmin, params.qmax)
    if scheme.range_mode == RangeMode.ASYMMETRIC:
        w = normalize(w, params)
    v = _to_levels(w / params.delta, scheme)
    if scheme.integer_repr == IntegerRepr.UNSIGNED:
        v = v + scheme.levels
    # two's complement in the low m bits
    return (v & scheme.mask).astype(np.uint8)


def decode_levels(codes: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Integer value of each code: sign-extended or offset-removed."""
    v = np.asarray(codes, dtype=np.int64) & scheme.mask
    if scheme.integer_repr == IntegerRepr.UNSIGNED:
        return v - scheme.levels
    sign = 1 << (scheme.m - 1)
    return (v ^ sign) - sign


def dequantize_group(codes: np.ndarray, params: QuantParams, scheme: QuantScheme) -> np.ndarray:
    w = decode_levels(codes, scheme) * params.delta
    if scheme.range_mode == RangeMode.ASYMMETRIC:
        w = denormalize(w, params)
    return w


def quantize(weights, params: list[QuantParams], scheme: QuantScheme, groups) -> QuantizedTensor:
    w = np.asarray(weights, dtype=np.float64).ravel()
    groups = check_groups(groups, w.size)
    codes = np.zeros(w.size, dtype=np.uint8)
    for p, (start, end) in zip(params, groups):
        codes[start:end] = quantize_group(w[start:end], p, scheme)
    return QuantizedTensor(codes, list(params), scheme, groups)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    out = np.zeros(q.size, dtype=np.float64)
    for p, (start, end) in zip(q.params, q.groups):
        out[start:end] = dequantize_group(q.codes[start:end], p, q.scheme)
    return out


def fake_quantize(weights, groups, scheme: QuantScheme) -> np.ndarray:
    """``dequantize(quantize(w))`` with freshly fitted ranges, same shape as ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    params = fit_range(w, groups, scheme)
    return dequantize(quantize(w, params, scheme, groups)).reshape(w.shape)


def quantize_weights(weights, groups, scheme: QuantScheme) -> QuantizedTensor:
    """Fit ranges and quantize in one go."""
    return quantize(weights, fit_range(weights, groups, scheme), scheme, groups)

"""Fast invariant checks runnable from an installed package (``bitrobust selftest``)."""

from __future__ import annotations

import itertools

import numpy as np

from .biterror import ChipField, apply_mask, inject_random
from .evalharness import prop1_bound
from .fixedpoint import (
    NORMAL,
    RQUANT,
    Granularity,
    IntegerRepr,
    QuantizedTensor,
    QuantParams,
    QuantScheme,
    RangeMode,
    Rounding,
    decode_levels,
    dequantize,
    quantize_weights,
)
from .smallnet import Model, backward, loss_value


def all_schemes(ms=(2, 3, 4, 8)):
    for m, g, r, i, rd in itertools.product(ms, Granularity, RangeMode, IntegerRepr, Rounding):
        if not (r == RangeMode.SYMMETRIC and i == IntegerRepr.UNSIGNED):
            yield QuantScheme(m, g, r, i, rd)


def check_msb_flip():
    unsigned = QuantizedTensor(np.array([127], np.uint8), [QuantParams.for_range(-1, 1, RQUANT)], RQUANT, [(0, 1)])
    signed = QuantizedTensor(np.array([127], np.uint8), [QuantParams.for_range(-1, 1, NORMAL)], NORMAL, [(0, 1)])
    mask = np.array([0x80], np.uint8)
    a, _ = apply_mask(unsigned, mask)
    b, _ = apply_mask(signed, mask)
    ok = a.codes[0] == 255 and decode_levels(b.codes, NORMAL)[0] == -1
    return ok, f"unsigned -> {a.codes[0]}, signed -> {decode_levels(b.codes, NORMAL)[0]}"


def check_roundtrip():
    w = np.random.default_rng(0).uniform(-0.8, 0.5, 2000)
    worst = 0.0
    for scheme in all_schemes():
        q = quantize_weights(w, [(0, 2000)], scheme)
        step = q.params[0].step(scheme)
        limit = step / 2 if scheme.rounding == Rounding.NEAREST else step
        worst = max(worst, float(np.max(np.abs(dequantize(q) - w)) / limit))
        if np.any(q.codes & ~np.uint8(scheme.mask)):
            return False, f"unmasked bits for {scheme}"
    return worst <= 1 + 1e-9, f"max error / bound = {worst:.6f}"


def check_persistence():
    masks = ChipField(7, 20_000, 8).flip_masks([0.001, 0.01, 0.05])
    ok = all(not np.any(lo & ~hi) for lo, hi in zip(masks, masks[1:]))
    return ok, ""


def check_involution():
    w = np.random.default_rng(1).normal(size=5000)
    q = quantize_weights(w, [(0, 5000)], RQUANT)
    chip = ChipField(3, q.size, 8)
    once, _ = inject_random(q, chip, 0.1)
    twice, _ = inject_random(once, chip, 0.1)
    return bool(np.array_equal(twice.codes, q.codes)), ""


def check_gradient():
    dims = (6, 5, 3)
    model = Model.init(dims, seed=0)
    gen = np.random.default_rng(0)
    x, y = gen.normal(size=(8, 6)), gen.integers(0, 3, 8)
    _, grad = backward(model.weights, x, y, dims)
    h = 1e-5
    fd = np.empty_like(grad)
    for k in range(grad.size):
        wp, wm = model.weights.copy(), model.weights.copy()
        wp[k] += h
        wm[k] -= h
        fd[k] = (loss_value(wp, x, y, dims) - loss_value(wm, x, y, dims)) / (2 * h)
    rel = float(np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    return rel <= 1e-4, f"relative error {rel:.2e}"


def check_bound():
    a, b = prop1_bound(10_000, 1_000_000, 0.01), prop1_bound(100_000, 1_000_000, 0.01)
    return abs(a - 0.041) <= 0.001 and abs(b - 0.017) <= 0.001, f"{a:.4f}, {b:.4f}"


CHECKS = {
    "msb flip decoding": check_msb_flip,
    "quantization round trip and masking": check_roundtrip,
    "error set persistence": check_persistence,
    "injection involution": check_involution,
    "gradient vs finite differences": check_gradient,
    "generalization bound values": check_bound,
}


def run_all():
    """Yield ``(name, passed, detail)`` for every check."""
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # report, do not abort the remaining checks
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        yield name, bool(ok), detail

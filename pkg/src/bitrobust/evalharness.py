"""Clean and robust test error over chip panels, profiled maps and L-inf noise."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .biterror import ChipField, ProfiledMap, apply_mask, inject_linf, profiled_mask
from .fixedpoint import QuantizedTensor, QuantScheme, dequantize, quantize_weights
from .smallnet import Model, softmax

REPORT_COLUMNS = (
    "model", "scheme", "m", "wmax", "p_train", "p_eval", "te", "rte_mean", "rte_std",
    "conf_clean", "conf_perturbed", "chips", "n_test",
)

BOUND_NOTE = (
    "eps = sqrt(log((n+1)/delta)/n) * (sqrt(l)+sqrt(n))/sqrt(l); "
    "delta is the failure probability (bound holds with probability 1-delta)"
)


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("BITERR_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items, threads: int | None = None) -> list:
    threads = n_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # map() preserves input order, so the merge is deterministic
        return list(pool.map(fn, items))


def error_rate(logits: np.ndarray, y) -> float:
    return float(np.mean(np.argmax(logits, axis=1) != np.asarray(y)))


def confidence(logits: np.ndarray) -> float:
    """Mean softmax probability of the predicted class."""
    return float(softmax(logits).max(axis=1).mean())


def codes_of(model: Model, scheme: QuantScheme | None = None) -> QuantizedTensor:
    """Stored codes of ``model``, quantizing its weights if it carries none."""
    if model.quantized is not None:
        if scheme is not None and model.quantized.scheme != scheme:
            raise ValueError(f"checkpoint was quantized with {model.quantized.scheme}, not {scheme}")
        return model.quantized
    if scheme is None:
        raise ValueError("model has no quantized weights and no scheme was given")
    return quantize_weights(model.weights, model.groups, scheme)


def test_error(model: Model, x, y, scheme: QuantScheme | None = None) -> float:
    """Clean error of the quantized model (of the float weights if unquantized and no scheme)."""
    if len(y) == 0:
        raise ValueError("empty test set")
    if model.quantized is None and scheme is None:
        return error_rate(model.forward(x), y)
    return error_rate(model.forward(x, dequantize(codes_of(model, scheme))), y)


@dataclass
class RobustnessReport:
    p: float
    te: float
    rte_mean: float
    rte_std: float
    conf_clean: float
    conf_perturbed: float
    chips: int
    n_test: int
    per_chip: tuple[float, ...] = ()


def _mean_std(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


def robust_sweep(
    model: Model, x, y, chips: list[ChipField], ps, scheme: QuantScheme | None = None, threads: int | None = None
) -> list[RobustnessReport]:
    """RTE at every rate in ``ps`` over the same chip panel.

    Each chip's field is realized once and thresholded at every rate, so the
    error sets across the sweep are nested per chip.
    """
    if not chips:
        raise ValueError("need at least one chip")
    if len(y) == 0:
        raise ValueError("empty test set")
    q = codes_of(model, scheme)
    ps = [float(p) for p in ps]
    clean_logits = model.forward(x, dequantize(q))
    te, conf_clean = error_rate(clean_logits, y), confidence(clean_logits)

    def one_chip(chip: ChipField):
        if chip.W != q.size or chip.m != q.scheme.m:
            raise ValueError("chip panel does not match the model's codes")
        out = []
        for p, mask in zip(ps, chip.flip_masks(ps)):
            if p == 0.0:
                out.append((te, conf_clean))
                continue
            noisy, _ = apply_mask(q, mask, p)
            logits = model.forward(x, dequantize(noisy))
            out.append((error_rate(logits, y), confidence(logits)))
        return out

    results = _map(one_chip, chips, threads)
    reports = []
    for k, p in enumerate(ps):
        errs = [r[k][0] for r in results]
        mean, std = _mean_std(errs)
        conf = float(np.mean([r[k][1] for r in results]))
        reports.append(RobustnessReport(p, te, mean, std, conf_clean, conf, len(chips), len(y), tuple(errs)))
    return reports


def robust_test_error(model: Model, x, y, chips, p: float, scheme: QuantScheme | None = None) -> RobustnessReport:
    return robust_sweep(model, x, y, chips, [p], scheme)[0]


def confidence_stats(model: Model, x, y, chips, p: float, scheme: QuantScheme | None = None) -> tuple[float, float]:
    r = robust_test_error(model, x, y, chips, p, scheme)
    return r.conf_clean, r.conf_perturbed


def profiled_rte(
    model: Model, x, y, pmap: ProfiledMap, offsets, sample_seed: int, scheme: QuantScheme | None = None
) -> float:
    """Mean error over linear weight-to-memory mappings starting at each offset."""
    offsets = list(offsets)
    if not offsets:
        raise ValueError("need at least one offset")
    q = codes_of(model, scheme)

    def one(offset):
        noisy, _ = apply_mask(q, profiled_mask(q, pmap, int(offset), sample_seed))
        return error_rate(model.forward(x, dequantize(noisy)), y)

    # sorted so the float summation order does not depend on the offset order
    return float(np.mean(sorted(_map(one, offsets))))


def linf_rte(model: Model, x, y, eps_rel: float, seeds, scheme: QuantScheme | None = None) -> tuple[float, float]:
    """Error under relative L-inf weight noise, mean and std over ``seeds``.

    Noise is added to the (dequantized) weights the network computes with.
    """
    w = dequantize(codes_of(model, scheme)) if (model.quantized is not None or scheme is not None) else model.weights
    errs = _map(lambda s: error_rate(model.forward(x, inject_linf(w, model.groups, eps_rel, s)), y), list(seeds))
    return _mean_std(errs)


def prop1_bound(n: int, l: int, delta: float) -> float:
    """Excess term of the robust-error generalization bound.

    With probability ``1 - delta`` the expected robust error over random error
    patterns exceeds the empirical error on ``n`` test examples and ``l``
    sampled patterns by less than the returned value.
    """
    if n < 1 or l < 1:
        raise ValueError("n and l must be at least 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(math.log((n + 1) / delta) / n) * (math.sqrt(l) + math.sqrt(n)) / math.sqrt(l)


def fmt6(value) -> str:
    if value is None:
        return ""
    return f"{value:.6g}"


def report_rows(name: str, scheme: QuantScheme, wmax, p_train, reports: list[RobustnessReport]) -> list[list[str]]:
    label = scheme_label(scheme)
    return [
        [
            name, label, str(scheme.m), fmt6(wmax), fmt6(p_train), fmt6(r.p), fmt6(r.te),
            fmt6(r.rte_mean), fmt6(r.rte_std), fmt6(r.conf_clean), fmt6(r.conf_perturbed),
            str(r.chips), str(r.n_test),
        ]
        for r in reports
    ]


def write_report(path, rows, header_note: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(rows)


def scheme_label(scheme: QuantScheme) -> str:
    parts = [
        scheme.granularity.name.lower(),
        scheme.range_mode.name.lower(),
        scheme.integer_repr.name.lower(),
        scheme.rounding.name.lower(),
    ]
    return "/".join(parts)


test_error.__test__ = False  # keep pytest from collecting the imported name

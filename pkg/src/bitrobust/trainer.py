"""Quantization-aware training, weight clipping and random bit error training.

One step of random bit error training:

1. clip the float master weights to ``[-wmax, wmax]``;
2. quantize them (ranges refit every step) and dequantize to ``w_q``;
3. clean forward/backward at ``w_q``;
4. flip random bits of the codes at rate ``p_train`` with a fresh chip, decode to ``w~_q``;
5. perturbed forward/backward at ``w~_q``;
6. update the float weights with ``grad_clean + lambda * grad_perturbed``.

Gradients are taken at the (possibly corrupted) quantized weights and applied
to the float weights unchanged, i.e. the quantizer is straight-through.
Injection only starts once a smoothed clean loss falls below a threshold.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .biterror import ErrorStream, inject_random
from .fixedpoint import RQUANT, QuantScheme, dequantize, quantize_weights
from .smallnet import CROSS_ENTROPY, LossSpec, Model, SGDMomentum, backward, clip_weights

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "epoch", "lr", "clean_loss", "perturbed_loss", "injection_active", "flipped_bits")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.05
    lr_milestones: tuple[float, ...] = (0.4, 0.6, 0.8)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    wmax: float | None = None
    p_train: float | None = None
    lam: float = 1.0
    gate_threshold: float = 1.75
    gate_decay: float = 0.95
    scheme: QuantScheme | None = RQUANT
    loss: LossSpec = field(default_factory=lambda: CROSS_ENTROPY)
    master_seed: int = 0
    require_clipping: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.wmax is not None and self.wmax <= 0:
            raise ValueError("wmax must be positive")
        if self.p_train is not None:
            if not 0.0 <= self.p_train <= 1.0:
                raise ValueError("p_train must lie in [0, 1]")
            if self.scheme is None:
                raise ValueError("bit error training needs a quantization scheme")
            if self.wmax is None and self.require_clipping:
                raise ValueError("p_train is set but wmax is not (set require_clipping=False to allow)")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by ``lr_factor`` after each milestone fraction of the epochs."""
        passed = sum(epoch >= round(f * self.epochs) for f in self.lr_milestones)
        return self.lr * self.lr_factor ** passed


class InjectionGate:
    """Latches on once the EMA of the clean loss drops below ``threshold``."""

    def __init__(self, threshold: float = 1.75, decay: float = 0.95):
        self.threshold = threshold
        self.decay = decay
        self.ema = None
        self.active = False

    def update(self, clean_loss: float) -> bool:
        if self.ema is None:
            self.ema = clean_loss
        else:
            self.ema = self.decay * self.ema + (1 - self.decay) * clean_loss
        if self.ema < self.threshold:
            self.active = True
        return self.active


@dataclass
class StepTrace:
    clean_loss: float
    perturbed_loss: float | None = None
    injection_active: bool = False
    flipped_bits: int = 0


def quantized_view(weights: np.ndarray, model: Model, cfg: TrainConfig):
    """Clip in place (if configured), then return codes and ``w_q``."""
    if cfg.wmax is not None:
        clip_weights(weights, cfg.wmax)
    if cfg.scheme is None:
        return None, weights.copy()
    q = quantize_weights(weights, model.groups, cfg.scheme)
    return q, dequantize(q)


def _check(value: float, what: str):
    if not math.isfinite(value):
        raise DivergenceError(f"{what} loss diverged ({value})")


def _gradients(model: Model, batch, cfg: TrainConfig, active: bool, stream: ErrorStream | None):
    x, y = batch
    q, w_q = quantized_view(model.weights, model, cfg)
    clean, grad = backward(w_q, x, y, model.dims, cfg.loss)
    _check(clean, "clean")
    trace = StepTrace(clean)
    if active:
        chip = stream.next_chip(q.size, q.scheme.m)
        noisy, report = inject_random(q, chip, cfg.p_train)
        perturbed, grad_p = backward(dequantize(noisy), x, y, model.dims, cfg.loss)
        _check(perturbed, "perturbed")
        grad = grad + cfg.lam * grad_p
        trace = StepTrace(clean, perturbed, True, report.flipped_bits)
    return trace, grad


def quant_aware_step(model: Model, batch, cfg: TrainConfig, opt: SGDMomentum, lr: float) -> StepTrace:
    """Clip, fake-quantize, clean forward/backward, update the float weights."""
    trace, grad = _gradients(model, batch, cfg, False, None)
    opt.step(model.weights, grad, lr)
    return trace


def randbet_step(
    model: Model, batch, cfg: TrainConfig, opt: SGDMomentum, lr: float, stream: ErrorStream, active: bool = True
) -> StepTrace:
    """One random bit error training step; behaves like ``quant_aware_step`` while inactive."""
    trace, grad = _gradients(model, batch, cfg, active, stream)
    opt.step(model.weights, grad, lr)
    return trace


def finalize(model: Model, cfg: TrainConfig) -> Model:
    """Clip and quantize the master weights; the result carries ``Q^-1(Q(w))`` and the codes."""
    weights = model.weights.copy()
    q, w_q = quantized_view(weights, model, cfg)
    return Model(model.dims, w_q, q)


def train(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> tuple[Model, list[dict]]:
    """Run all epochs over shuffled mini-batches; deterministic given ``cfg.master_seed``.

    ``model`` is trained in place; the returned model holds the final
    quantized-dequantized weights plus their codes.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("training set must be nonempty with one label per example")
    shuffle = np.random.default_rng(rng.derive_seed(cfg.master_seed, 0))
    stream = ErrorStream(rng.derive_seed(cfg.master_seed, 1))
    opt = SGDMomentum(cfg.momentum, cfg.weight_decay)
    gate = InjectionGate(cfg.gate_threshold, cfg.gate_decay)
    bit_errors = cfg.p_train is not None

    trace_log = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle.permutation(x.shape[0])
        for start in range(0, x.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = (x[idx], y[idx])
            if bit_errors:
                tr = randbet_step(model, batch, cfg, opt, lr, stream, active=gate.active)
                gate.update(tr.clean_loss)
            else:
                tr = quant_aware_step(model, batch, cfg, opt, lr)
            trace_log.append(
                dict(
                    step=step,
                    epoch=epoch,
                    lr=lr,
                    clean_loss=tr.clean_loss,
                    perturbed_loss=tr.perturbed_loss,
                    injection_active=tr.injection_active,
                    flipped_bits=tr.flipped_bits,
                )
            )
            step += 1
        log.debug("epoch %d lr %.4g loss %.4f", epoch, lr, trace_log[-1]["clean_loss"])
    return finalize(model, cfg), trace_log


def fmt_float(value) -> str:
    return "" if value is None else f"{value:.6g}"


def write_trace(path, trace_log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace_log:
            writer.writerow(
                [
                    row["step"],
                    row["epoch"],
                    fmt_float(row["lr"]),
                    fmt_float(row["clean_loss"]),
                    fmt_float(row["perturbed_loss"]),
                    int(row["injection_active"]),
                    row["flipped_bits"],
                ]
            )

"""Dense ReLU network over a single flat weight vector.

All parameters live in one float64 vector so that quantization, bit error
injection and clipping operate on the same memory layout that is stored to
disk: for each layer the ``(in, out)`` weight matrix in row-major order
followed by its bias.  ``forward``/``backward`` take that vector explicitly,
so a fake-quantized or corrupted copy can be evaluated without touching the
master weights.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass

import numpy as np

from .fixedpoint import QuantizedTensor


class LossKind(enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    LABEL_SMOOTHED = "label_smoothed"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.CROSS_ENTROPY
    smooth_target: float = 0.9

    def targets(self, y: np.ndarray, n_classes: int) -> np.ndarray:
        if self.kind == LossKind.CROSS_ENTROPY:
            t = np.zeros((y.size, n_classes))
            t[np.arange(y.size), y] = 1.0
            return t
        if not 1.0 / n_classes < self.smooth_target <= 1.0:
            raise ValueError(f"smooth_target must lie in (1/{n_classes}, 1]")
        t = np.full((y.size, n_classes), (1.0 - self.smooth_target) / (n_classes - 1))
        t[np.arange(y.size), y] = self.smooth_target
        return t


CROSS_ENTROPY = LossSpec()


def layer_slices(dims) -> list[tuple[slice, slice]]:
    """Weight and bias slices of the flat vector, per layer."""
    out, pos = [], 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        w = slice(pos, pos + n_in * n_out)
        pos += n_in * n_out
        b = slice(pos, pos + n_out)
        pos += n_out
        out.append((w, b))
    return out


def n_params(dims) -> int:
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


def param_groups(dims) -> list[tuple[int, int]]:
    """Quantization groups: weights and biases of each layer separately."""
    groups = []
    for w, b in layer_slices(dims):
        groups += [(w.start, w.stop), (b.start, b.stop)]
    return groups


def _unpack(weights: np.ndarray, dims):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or weights.size != n_params(dims):
        raise ValueError(f"weight vector has {weights.size} entries, architecture {tuple(dims)} needs {n_params(dims)}")
    return [
        (weights[w].reshape(n_in, n_out), weights[b])
        for (w, b), n_in, n_out in zip(layer_slices(dims), dims[:-1], dims[1:])
    ]


def _check_input(x: np.ndarray, dims) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dims[0]:
        raise ValueError(f"inputs must have shape (n, {dims[0]}), got {x.shape}")
    return x


def forward(weights, x, dims) -> np.ndarray:
    """Logits of the network given by ``weights`` on inputs ``x``."""
    x = _check_input(x, dims)
    layers = _unpack(weights, dims)
    h = x
    for k, (W, b) in enumerate(layers):
        h = h @ W + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def loss_value(weights, x, y, dims, loss: LossSpec = CROSS_ENTROPY) -> float:
    logp = log_softmax(forward(weights, x, dims))
    t = loss.targets(np.asarray(y), dims[-1])
    return float(-(t * logp).sum(axis=1).mean())


def backward(weights, x, y, dims, loss: LossSpec = CROSS_ENTROPY) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient w.r.t. the flat ``weights``."""
    x = _check_input(x, dims)
    y = np.asarray(y)
    layers = _unpack(weights, dims)
    acts = [x]
    h = x
    for k, (W, b) in enumerate(layers):
        h = h @ W + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)

    logp = log_softmax(h)
    t = loss.targets(y, dims[-1])
    n = x.shape[0]
    value = float(-(t * logp).sum(axis=1).mean())

    grad = np.empty(n_params(dims))
    delta = (np.exp(logp) - t) / n
    for k in range(len(layers) - 1, -1, -1):
        w_sl, b_sl = layer_slices(dims)[k]
        grad[w_sl] = (acts[k].T @ delta).ravel()
        grad[b_sl] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ layers[k][0].T) * (acts[k] > 0)
    return value, grad


def clip_weights(weights: np.ndarray, wmax: float) -> np.ndarray:
    """Project onto ``[-wmax, wmax]`` element-wise, in place; returns ``weights``."""
    if wmax <= 0:
        raise ValueError("wmax must be positive")
    return np.clip(weights, -wmax, wmax, out=weights)


class SGDMomentum:
    """Heavy-ball SGD: ``buf = momentum*buf + (g + wd*w)``, ``w -= lr*buf``."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = None

    def step(self, weights: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if grad.shape != weights.shape:
            raise ValueError("gradient and weight shapes differ")
        g = grad + self.weight_decay * weights if self.weight_decay else grad
        if self.buf is None:
            self.buf = np.zeros_like(weights)
        self.buf *= self.momentum
        self.buf += g
        weights -= lr * self.buf
        return weights


@dataclass
class Model:
    dims: tuple[int, ...]
    weights: np.ndarray
    quantized: QuantizedTensor | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.size != n_params(self.dims):
            raise ValueError("weight count does not match architecture")

    @classmethod
    def init(cls, dims, seed: int = 0) -> "Model":
        """He-style uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
        gen = np.random.default_rng(seed)
        w = np.zeros(n_params(dims))
        for (ws, _), n_in in zip(layer_slices(dims), dims[:-1]):
            bound = np.sqrt(6.0 / n_in)
            w[ws] = gen.uniform(-bound, bound, ws.stop - ws.start)
        return cls(tuple(dims), w)

    @property
    def groups(self) -> list[tuple[int, int]]:
        return param_groups(self.dims)

    def forward(self, x, weights=None) -> np.ndarray:
        return forward(self.weights if weights is None else weights, x, self.dims)

    def predict(self, x, weights=None) -> np.ndarray:
        return self.forward(x, weights).argmax(axis=1)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(b"BNN1")
        buf.write(struct.pack("<I", len(self.dims) - 1))
        for n_in, n_out in zip(self.dims[:-1], self.dims[1:]):
            buf.write(struct.pack("<II", n_in, n_out))
        for w, b in layer_slices(self.dims):
            buf.write(self.weights[w].astype("<f8").tobytes())
            buf.write(self.weights[b].astype("<f8").tobytes())
        if self.quantized is not None:
            buf.write(self.quantized.to_bytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Model":
        if data[:4] != b"BNN1":
            raise ValueError("not a BNN1 checkpoint (bad magic)")
        try:
            (n_layers,) = struct.unpack_from("<I", data, 4)
            pos = 8
            dims = []
            for k in range(n_layers):
                n_in, n_out = struct.unpack_from("<II", data, pos)
                pos += 8
                if k == 0:
                    dims.append(n_in)
                elif n_in != dims[-1]:
                    raise ValueError("inconsistent layer dimensions in checkpoint")
                dims.append(n_out)
        except struct.error:
            raise ValueError("truncated BNN1 checkpoint") from None
        size = n_params(dims)
        if len(data) < pos + 8 * size:
            raise ValueError("truncated BNN1 checkpoint")
        weights = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64)
        pos += 8 * size
        quantized = None
        if pos < len(data):
            quantized, end = QuantizedTensor.from_bytes(data, pos)
            if quantized.size != size or quantized.groups != param_groups(dims):
                raise ValueError("quantized record does not match the network layout")
            if end != len(data):
                raise ValueError("trailing bytes after checkpoint")
        return cls(tuple(dims), weights, quantized)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

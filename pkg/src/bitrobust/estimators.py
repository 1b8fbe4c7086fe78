"""scikit-learn compatible wrappers around the quantizer and the trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, validate_data

from .biterror import sample_chips
from .evalharness import RobustnessReport, robust_sweep
from .fixedpoint import (
    NORMAL,
    RQUANT,
    Granularity,
    IntegerRepr,
    QuantScheme,
    RangeMode,
    Rounding,
    dequantize,
    dequantize_group,
    fit_range,
    quantize,
)
from .smallnet import CROSS_ENTROPY, Model, softmax
from .trainer import TrainConfig, train


def _scheme(m, granularity, range_mode, integer_repr, rounding) -> QuantScheme:
    try:
        return QuantScheme(
            m,
            Granularity[granularity.upper()],
            RangeMode[range_mode.upper()],
            IntegerRepr[integer_repr.upper()],
            Rounding[rounding.upper()],
        )
    except KeyError as exc:
        raise ValueError(f"unknown scheme option {exc}") from None


class FixedPointQuantizer(TransformerMixin, BaseEstimator):
    """Encode each feature column as m-bit fixed-point codes.

    ``fit`` learns the quantization range per column (``per_group``) or one
    range for all columns (``global``).  ``transform`` returns uint8 codes,
    values outside the fitted range saturate; ``inverse_transform`` decodes.
    """

    def __init__(self, m=8, granularity="per_group", range_mode="asymmetric", integer_repr="unsigned", rounding="nearest"):
        self.m = m
        self.granularity = granularity
        self.range_mode = range_mode
        self.integer_repr = integer_repr
        self.rounding = rounding

    def _groups(self, n_rows):
        return [(k * n_rows, (k + 1) * n_rows) for k in range(self.n_features_in_)]

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        self.scheme_ = _scheme(self.m, self.granularity, self.range_mode, self.integer_repr, self.rounding)
        # column-major so every column is one contiguous group
        self.params_ = fit_range(X.T.ravel(), self._groups(X.shape[0]), self.scheme_)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        q = quantize(X.T.ravel(), self.params_, self.scheme_, self._groups(X.shape[0]))
        return q.codes.reshape(X.shape[1], X.shape[0]).T.copy()

    def inverse_transform(self, X):
        check_is_fitted(self, "params_")
        codes = check_array(X, dtype=None)
        self._check_width(codes)
        if np.any((codes < 0) | (codes > self.scheme_.mask)):
            raise ValueError(f"codes must lie in [0, {self.scheme_.mask}]")
        flat = codes.astype(np.uint8).T.ravel()
        n = codes.shape[0]
        out = np.empty(flat.size)
        for (start, end), params in zip(self._groups(n), self.params_):
            out[start:end] = dequantize_group(flat[start:end], params, self.scheme_)
        return out.reshape(codes.shape[1], n).T.copy()

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.transformer_tags.preserves_dtype = []  # output is integer codes
        return tags

    def _check_width(self, X):
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")


class RobustMLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP trained with quantization, optional weight clipping and random bit errors.

    ``preset`` selects the quantization scheme (``normal`` or ``rquant``);
    setting ``wmax`` enables clipping and ``p_train`` enables bit error
    training.  Predictions use the stored fixed-point weights.
    """

    def __init__(
        self,
        hidden=(256, 128),
        preset="rquant",
        m=8,
        wmax=None,
        p_train=None,
        epochs=10,
        batch_size=32,
        lr=0.05,
        momentum=0.9,
        weight_decay=5e-4,
        random_state=0,
    ):
        self.hidden = hidden
        self.preset = preset
        self.m = m
        self.wmax = wmax
        self.p_train = p_train
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        if self.preset not in ("normal", "rquant"):
            raise ValueError(f"preset must be 'normal' or 'rquant', got {self.preset!r}")
        base = NORMAL if self.preset == "normal" else RQUANT
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            wmax=self.wmax,
            p_train=self.p_train,
            scheme=base.replace(m=self.m),
            loss=CROSS_ENTROPY,
            master_seed=self.random_state,
        )

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        cfg = self._train_config()
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("training data has only one class; need at least two")
        dims = (X.shape[1], *self.hidden, self.classes_.size)
        self.model_, self.trace_ = train(Model.init(dims, seed=self.random_state), X, encoded, cfg)
        return self

    def _logits(self, X, weights=None):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return self.model_.forward(X, weights)

    def decision_function(self, X):
        logits = self._logits(X)
        if logits.shape[1] == 2:
            return logits[:, 1] - logits[:, 0]
        return logits

    def predict_proba(self, X):
        return softmax(self._logits(X))

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def robust_score(self, X, y, p, chips=20, chip_seed=0) -> RobustnessReport:
        """Clean and bit-error-perturbed error on ``(X, y)`` over a fixed chip panel."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        encoded = np.searchsorted(self.classes_, y)
        known = (encoded < self.classes_.size) & (self.classes_[np.minimum(encoded, self.classes_.size - 1)] == y)
        # unseen labels can never be predicted; count them as errors
        encoded = np.where(known, encoded, -1)
        q = self.model_.quantized
        panel = sample_chips(chip_seed, chips, q.size, q.scheme.m)
        return robust_sweep(self.model_, X, encoded, panel, [p])[0]

    def quantized_weights(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        return dequantize(self.model_.quantized)

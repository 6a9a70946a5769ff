"""scikit-learn transformers that round data through a storage format.

``transform`` returns the dequantized values, so a quantizer can sit inside
a :class:`sklearn.pipeline.Pipeline` to measure how a downstream model
reacts to low-precision storage. Rows are samples; grouped formats group
along the feature axis. Stochastic rounding restarts from ``seed`` on
every call, so ``transform`` is deterministic.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from . import formats as fm
from . import mx
from .rounding import DEFAULT_SEED, NEAREST_EVEN, STOCHASTIC, RoundingMode


class FormatQuantizer(TransformerMixin, BaseEstimator):
    """Fake-quantize features in one of ``int8_group``, ``e4m3``, ``e5m2``, ``fp16``, ``mx8``."""

    def __init__(self, fmt: str = "mx8", rounding: str = NEAREST_EVEN, seed: int = DEFAULT_SEED):
        self.fmt = fmt
        self.rounding = rounding
        self.seed = seed

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        # stochastic words are drawn in row order, so a row's result depends on its position
        tags.non_deterministic = self.rounding == STOCHASTIC
        return tags

    def _rounding_mode(self) -> RoundingMode:
        return RoundingMode(self.rounding, self.seed)

    def _check_params(self):
        if self.fmt not in fm.FORMATS:
            raise ValueError(f"unknown format {self.fmt!r}; expected one of {fm.FORMATS}")
        if self.rounding not in (NEAREST_EVEN, STOCHASTIC):
            raise ValueError(f"unknown rounding {self.rounding!r}")
        self._rounding_mode()  # validates the seed

    def fit(self, X, y=None):
        self._check_params()
        X = validate_data(self, X, dtype=np.float64)
        self.bits_per_element_ = fm.BITS_PER_ELEMENT[self.fmt]
        self.fit_error_ = self._relative_error(X)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return fm.fake_quantize(X, self.fmt, self._rounding_mode(), axis=1)

    def inverse_transform(self, X):
        """Quantized values are already real numbers; returned unchanged."""
        check_is_fitted(self)
        return check_array(X, dtype=np.float64)

    def _relative_error(self, X):
        q = fm.fake_quantize(X, self.fmt, self._rounding_mode(), axis=1)
        norm = np.linalg.norm(X)
        return float(np.linalg.norm(q - X) / norm) if norm else 0.0

    def score(self, X, y=None):
        """Negative relative Frobenius error of the round trip (higher is better)."""
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return -self._relative_error(X)

    def encode(self, X) -> fm.Encoded:
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return fm.quantize_format(X, self.fmt, self._rounding_mode(), axis=1)


class MXQuantizer(FormatQuantizer):
    """MX8 quantizer; ``encode`` returns the groups of each row, shape (n_samples, n_groups)."""

    fmt = "mx8"

    def __init__(self, rounding: str = NEAREST_EVEN, seed: int = DEFAULT_SEED):
        self.rounding = rounding
        self.seed = seed

    def encode(self, X) -> mx.MXGroup:
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return mx.quantize_vector(X, self._rounding_mode())

    def decode(self, groups: mx.MXGroup) -> np.ndarray:
        check_is_fitted(self)
        return mx.dequantize_vector(groups, self.n_features_in_)

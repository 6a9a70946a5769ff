import numpy as np
import pytest
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.estimator_checks import parametrize_with_checks

from statepim import formats as fm
from statepim import mx
from statepim.estimators import FormatQuantizer, MXQuantizer
from statepim.rounding import STOCHASTIC


@parametrize_with_checks([FormatQuantizer(), FormatQuantizer(fmt="e4m3"), MXQuantizer()])
def test_sklearn_compatible(estimator, check):
    check(estimator)


@pytest.mark.parametrize("fmt", fm.FORMATS)
def test_transform_is_fake_quantize(fmt):
    X = np.random.default_rng(0).standard_normal((10, 40))
    q = FormatQuantizer(fmt=fmt).fit(X)
    assert np.array_equal(q.transform(X), fm.fake_quantize(X, fmt, axis=1))
    assert q.bits_per_element_ == fm.BITS_PER_ELEMENT[fmt]
    assert q.score(X) == pytest.approx(-q.fit_error_)


def test_error_falls_with_mantissa_bits():
    X = np.random.default_rng(1).standard_normal((50, 64))
    err = {f: FormatQuantizer(fmt=f).fit(X).fit_error_ for f in ("e5m2", "e4m3", "mx8", "fp16")}
    assert err["e5m2"] > err["e4m3"] > err["mx8"] > err["fp16"]


def test_stochastic_transform_repeats_from_seed():
    X = np.random.default_rng(2).standard_normal((8, 32))
    q = FormatQuantizer(fmt="e4m3", rounding=STOCHASTIC, seed=17).fit(X)
    assert np.array_equal(q.transform(X), q.transform(X))
    other = FormatQuantizer(fmt="e4m3", rounding=STOCHASTIC, seed=18).fit(X)
    assert not np.array_equal(q.transform(X), other.transform(X))


def test_mx_encode_decode():
    X = np.random.default_rng(3).standard_normal((6, 20))
    q = MXQuantizer().fit(X)
    g = q.encode(X)
    assert isinstance(g, mx.MXGroup) and g.shape == (6, 2)
    assert np.array_equal(q.decode(g), q.transform(X))


def test_invalid_params_raise_on_fit():
    with pytest.raises(ValueError):
        FormatQuantizer(fmt="int4").fit(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        FormatQuantizer(rounding="up").fit(np.zeros((2, 2)))


def test_in_pipeline():
    X = np.random.default_rng(4).standard_normal((20, 16))
    out = make_pipeline(StandardScaler(), MXQuantizer()).fit_transform(X)
    assert out.shape == X.shape

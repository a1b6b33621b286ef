import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import tone
from pmae.datagen import synth_dataset
from pmae.estimators import (HeartRateTransformer, PeriodicMAEPretrainer, RPPGRegressor,
                             check_signal, check_video_array)
from pmae.training import set_reference_mode

SMALL = dict(D=16, enc_depth=1, dec_depth=1, heads=2, C_stem=8)


@pytest.fixture(scope="module")
def data():
    set_reference_mode()
    clips = synth_dataset(4, seed=0, T=16, H=16, W=16, pulse_amplitude=0.06)
    return np.stack([c.frames for c in clips]), np.stack([c.ppg for c in clips])


def test_check_video_array():
    X = check_video_array(np.zeros((2, 4, 16, 16, 3), np.float64))
    assert X.dtype == np.float32 and X.flags.c_contiguous
    assert check_video_array(np.zeros((4, 16, 16, 3))).shape == (1, 4, 16, 16, 3)
    with pytest.raises(ValueError):
        check_video_array(np.zeros((4, 16, 16, 3)), allow_single=False)
    with pytest.raises(ValueError):
        check_video_array(np.zeros((1, 4, 20, 16, 3)))
    with pytest.raises(ValueError):
        check_video_array(np.zeros((1, 4, 16, 16, 1)))
    with pytest.raises(ValueError):
        check_video_array(np.full((1, 4, 16, 16, 3), np.nan))
    with pytest.raises(TypeError):
        check_video_array(np.full((1, 4, 16, 16, 3), "a"))


def test_check_signal():
    assert check_signal([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ValueError):
        check_signal(np.zeros((2, 5)), n_clips=3)
    with pytest.raises(ValueError):
        check_signal(np.zeros((2, 5)), T=6)
    with pytest.raises(ValueError):
        check_signal([np.inf])


def test_params_and_clone():
    est = RPPGRegressor(lambda1=3.0, epochs=2)
    assert est.get_params()["lambda1"] == 3.0
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    assert PeriodicMAEPretrainer().set_params(mask_strategy="tube").mask_strategy == "tube"


def test_not_fitted(data):
    X, _ = data
    with pytest.raises(NotFittedError):
        RPPGRegressor().predict(X)
    with pytest.raises(NotFittedError):
        PeriodicMAEPretrainer().transform(X)


def test_pretrain_then_regress(data):
    X, y = data
    pre = PeriodicMAEPretrainer(epochs=1, **SMALL).fit(X)
    feats = pre.transform(X)
    assert feats.shape == (4, 16, 16) and np.isfinite(feats).all()
    assert len(pre.record_.epochs) == 1

    reg = RPPGRegressor(epochs=1, batch_size=4, pretrained=pre, **SMALL).fit(X, y)
    pred = reg.predict(X)
    assert pred.shape == y.shape and np.isfinite(pred).all()
    assert -1.0 <= reg.score(X, y) <= 1.0
    with pytest.raises(ValueError):
        reg.predict(X[:, :8])


def test_regressor_deterministic(data):
    X, y = data
    a = RPPGRegressor(epochs=1, batch_size=4, **SMALL).fit(X, y).predict(X)
    b = RPPGRegressor(epochs=1, batch_size=4, **SMALL).fit(X, y).predict(X)
    np.testing.assert_array_equal(a, b)


def test_heart_rate_transformer():
    sig = np.stack([tone(1.2, 300), tone(2.0, 300)])
    hr = HeartRateTransformer().fit_transform(sig)
    np.testing.assert_allclose(hr, [72.0, 120.0])
    with pytest.raises(ValueError):
        HeartRateTransformer(band_lo=20.0).fit(sig)

import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_dft_power, tone
from pmae.spectral import (BandLimits, DegenerateSpectrumWarning, EmptyBandError, band_power_fraction,
                           dominant_frequency, hr_from_signal, psd, snr_metric)

FS = 30.0
BAND = BandLimits()

signals = st.integers(8, 96).flatmap(
    lambda n: arrays(np.float64, n, elements=st.floats(-10, 10, allow_nan=False, width=64)))
# long enough that the band holds at least one bin at 30 Hz
banded = st.integers(24, 96).flatmap(
    lambda n: arrays(np.float64, n, elements=st.floats(-10, 10, allow_nan=False, width=64)))


def test_shapes_and_frequencies():
    s = psd(np.random.default_rng(0).normal(size=161), FS)
    assert s.power.shape == (81,)
    np.testing.assert_allclose(s.freqs, np.arange(81) * FS / 161)
    assert s.resolution == pytest.approx(FS / 161)


def test_constant_is_dc_only():
    s = psd(np.ones(8), FS)
    assert s.power[0] == pytest.approx(8.0)
    np.testing.assert_allclose(s.power[1:], 0.0, atol=1e-12)


def test_cosine_on_bin_8():
    x = np.cos(2 * np.pi * 1.5 * np.arange(160) / FS)
    s = psd(x, FS)
    assert int(np.argmax(s.power)) == 8
    assert s.freqs[8] == pytest.approx(1.5)
    assert s.power[8] / s.power.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("n", [8, 9, 16, 63, 64, 160])
def test_matches_dft_oracle(n):
    x = np.random.default_rng(n).normal(size=n)
    p_ref, f_ref = naive_dft_power(x, FS)
    s = psd(x, FS)
    np.testing.assert_allclose(s.power, p_ref, rtol=1e-9, atol=1e-12 * p_ref.max())
    np.testing.assert_allclose(s.freqs, f_ref)


@settings(max_examples=60, deadline=None)
@given(signals)
def test_parseval(x):
    s = psd(x, FS)
    assert np.all(s.power >= 0)
    assert s.power.sum() == pytest.approx(float((x ** 2).sum()), rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(signals)
def test_time_reversal(x):
    np.testing.assert_allclose(psd(x[::-1].copy(), FS).power, psd(x, FS).power,
                               rtol=1e-9, atol=1e-9 * max(1.0, float((x ** 2).sum())))


@settings(max_examples=40, deadline=None)
@given(signals)
def test_inside_plus_outside_is_one(x):
    s = psd(x, FS)
    if s.power.sum() == 0:
        return
    assert band_power_fraction(s, BAND, True) + band_power_fraction(s, BAND, False) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(banded, st.floats(1e-3, 1e3))
def test_dominant_frequency_scale_invariant(x, alpha):
    s = psd(x, FS)
    scaled = psd(alpha * x, FS)
    assert dominant_frequency(s, BAND) == dominant_frequency(scaled, BAND)


def test_band_power_examples():
    n = 160
    assert band_power_fraction(psd(tone(1.5, n), FS), BAND, inside=False) < 0.05
    assert band_power_fraction(psd(tone(5.0, n), FS), BAND, inside=False) > 0.95
    mix = tone(1.5, n) + tone(5.0, n)
    assert band_power_fraction(psd(mix, FS), BAND, inside=False) == pytest.approx(0.5, abs=0.05)


def test_zero_power_warns():
    with pytest.warns(DegenerateSpectrumWarning):
        assert band_power_fraction(psd(np.zeros(16), FS), BAND) == 0.0


def test_tensor_path_keeps_grad():
    x = torch.randn(2, 32, dtype=torch.float64, requires_grad=True)
    s = psd(x, FS)
    assert isinstance(s.power, torch.Tensor) and s.power.shape == (2, 17)
    s.power.sum().backward()
    np.testing.assert_allclose(x.grad.numpy(), 2 * x.detach().numpy(), rtol=1e-9)


@pytest.mark.parametrize("bad", [np.ones(7), np.array([1.0] * 10 + [np.nan])])
def test_invalid_input(bad):
    with pytest.raises(ValueError):
        psd(bad, FS)


def test_invalid_fs():
    with pytest.raises(ValueError):
        psd(np.ones(16), 0.0)


def test_dominant_frequency_examples():
    assert dominant_frequency(psd(tone(1.2, 160), FS), BAND) == pytest.approx(1.125)
    # lowest in-band bin when everything is tied at zero
    s = psd(np.ones(160), FS)
    assert dominant_frequency(s, BAND) == pytest.approx(0.75)
    two = tone(1.0, 160, amp=2.0) + tone(2.0, 160, amp=1.0)
    assert dominant_frequency(psd(two, FS), BAND) == pytest.approx(0.9375)


def test_empty_band():
    s = psd(np.random.default_rng(0).normal(size=16), FS)
    with pytest.raises(EmptyBandError):
        dominant_frequency(s, BandLimits(1.0, 1.5))


def test_interpolated_peak_is_closer():
    s = psd(tone(1.2, 160), FS)
    assert abs(dominant_frequency(s, BAND, interpolate=True) - 1.2) < abs(1.125 - 1.2)


def test_hr_examples():
    assert hr_from_signal(tone(1.2, 160), FS) == pytest.approx(67.5)
    assert hr_from_signal(tone(1.2, 960), FS) == pytest.approx(72.0, abs=1.0)
    # n=300 puts both tones on bins, so leakage from 0.5 Hz cannot win
    x = tone(0.5, 300) + tone(1.5, 300, amp=0.2)
    assert hr_from_signal(x, FS) == pytest.approx(90.0)
    assert hr_from_signal(torch.tensor(tone(1.5, 160)), FS) == pytest.approx(90.0)


def test_band_validation():
    with pytest.raises(ValueError):
        BandLimits(3.0, 1.0)
    with pytest.raises(ValueError):
        BandLimits(0.5, 20.0).check(FS)
    assert BandLimits().to_bpm() == pytest.approx((40.0, 180.0))


def test_snr_examples():
    n = 900
    assert snr_metric(tone(1.2, n), 72.0, FS) >= 20.0
    assert snr_metric(tone(2.2, n), 72.0, FS) < -10.0
    # at n=160 the Hann main lobe is wider than the +-0.1 Hz window
    on_bin = tone(1.125, 160)
    assert snr_metric(on_bin, 67.5, FS) == 60.0
    assert 0.0 < snr_metric(on_bin, 67.5, FS, window="hann") < 10.0
    noise = np.random.default_rng(0).normal(size=n)
    assert snr_metric(noise, 72.0, FS) < -3.0
    with pytest.raises(ValueError):
        snr_metric(noise, 200.0, FS)


def test_snr_clamps_when_no_noise():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert snr_metric(tone(1.2, 900), 72.0, FS, window=None) == 60.0


def test_snr_ignores_offset():
    x = tone(1.2, 300)
    assert snr_metric(x + 5.0, 72.0, FS) == pytest.approx(snr_metric(x, 72.0, FS))

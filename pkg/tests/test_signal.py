import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fiberae.signal import (
    ComplexSignal,
    DegenerateSignalError,
    SymbolBlock,
    circular_convolve,
    dbm_to_watt,
    downsample,
    fft,
    fir_filter,
    ideal_lowpass,
    ifft,
    normalize_power,
    upsample,
    welch_psd,
)


def rand_c(rng, n):
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def dft_oracle(x):
    n = x.size
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x / np.sqrt(n)


def test_fft_constant_and_impulse():
    spec = fft(ComplexSignal([1, 1, 1, 1], 4.0))
    np.testing.assert_allclose(spec.bins, [2, 0, 0, 0], atol=1e-15)
    spec = fft(ComplexSignal([1, 0, 0, 0], 4.0))
    np.testing.assert_allclose(spec.bins, [0.5] * 4, atol=1e-15)


def test_fft_matches_direct_dft_and_parseval():
    rng = np.random.default_rng(0)
    x = rand_c(rng, 64)
    spec = fft(ComplexSignal(x, 1.0))
    np.testing.assert_allclose(spec.bins, dft_oracle(x), rtol=0, atol=1e-12 * np.linalg.norm(x))
    assert abs(np.sum(np.abs(spec.bins) ** 2) / np.sum(np.abs(x) ** 2) - 1) < 1e-12


@pytest.mark.parametrize("n", [1, 7, 96, 1000, 2**17])
def test_fft_round_trip(n):
    x = rand_c(np.random.default_rng(n), n)
    back = ifft(fft(ComplexSignal(x, 10.0))).samples
    assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-12


def test_spectrum_frequencies():
    spec = fft(ComplexSignal(np.ones(8), 8e9))
    np.testing.assert_allclose(spec.frequencies, np.fft.fftfreq(8, 1 / 8e9))


def test_empty_signal_rejected():
    with pytest.raises(ValueError):
        ComplexSignal([], 1.0)
    with pytest.raises(ValueError):
        ComplexSignal([1.0], 0.0)


def test_symbol_block_validates_range():
    with pytest.raises(ValueError):
        SymbolBlock(np.array([0, 4]), 4)
    assert len(SymbolBlock(np.array([0, 3]), 4)) == 2


def test_upsample_downsample_examples():
    a, b = 1 + 2j, -3j
    np.testing.assert_array_equal(upsample([a, b], 2).samples, [a, 0, b, 0])
    np.testing.assert_array_equal(upsample([a], 1).samples, [a])
    np.testing.assert_array_equal(downsample(np.array([a, 0, b, 0]), 2, 0), [a, b])
    np.testing.assert_array_equal(downsample(np.array([1, 2, 3, 4]), 4, 2), [3])
    with pytest.raises(ValueError):
        upsample([a], 0)
    with pytest.raises(ValueError):
        downsample(np.arange(5), 2)
    with pytest.raises(ValueError):
        downsample(np.arange(4), 2, offset=2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 2**31))
def test_upsample_round_trip_energy_and_adjointness(n, k, seed):
    rng = np.random.default_rng(seed)
    v = rand_c(rng, n)
    up = upsample(v, k).samples
    np.testing.assert_array_equal(downsample(up, k, 0), v)
    assert np.isclose(np.sum(np.abs(up) ** 2), np.sum(np.abs(v) ** 2), rtol=1e-14)
    w = rand_c(rng, n * k)
    assert np.isclose(np.vdot(up, w), np.vdot(v, downsample(w, k, 0)), rtol=1e-12)


def test_fir_examples():
    a, b, c = 1.0, 2j, -3.0
    x = ComplexSignal([a, b, c], 1.0)
    np.testing.assert_allclose(fir_filter(x, [1]).samples, [a, b, c], atol=1e-15)
    np.testing.assert_allclose(fir_filter(x, [0, 1]).samples, [c, a, b], atol=1e-15)
    with pytest.raises(ValueError):
        fir_filter(x, [1, 2, 3, 4])
    with pytest.raises(ValueError):
        fir_filter(x, [])


def test_fir_matches_time_domain_oracle():
    rng = np.random.default_rng(3)
    x, taps = rand_c(rng, 50), rand_c(rng, 11)
    for center in (0, 5):
        ref = np.array([
            sum(taps[k] * x[(n - (k - center)) % 50] for k in range(11)) for n in range(50)
        ])
        out = fir_filter(ComplexSignal(x, 1.0), taps, center).samples
        assert np.max(np.abs(out - ref)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_fir_linear_and_shift_equivariant(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x, y, taps = rand_c(rng, 32), rand_c(rng, 32), rand_c(rng, 5)
    lhs = circular_convolve(alpha * x + beta * y, taps)
    rhs = alpha * circular_convolve(x, taps) + beta * circular_convolve(y, taps)
    assert np.max(np.abs(lhs - rhs)) < 1e-12 * (1 + np.max(np.abs(rhs)))
    shifted = circular_convolve(np.roll(x, 3), taps)
    assert np.max(np.abs(shifted - np.roll(circular_convolve(x, taps), 3))) < 1e-12 * np.max(np.abs(shifted))


def tone(n, fs, f, amp=1.0):
    t = np.arange(n) / fs
    return amp * np.exp(2j * np.pi * f * t)


def test_ideal_lowpass():
    n, fs = 256, 256.0
    rng = np.random.default_rng(1)
    x = ComplexSignal(rand_c(rng, n), fs)
    assert np.linalg.norm(ideal_lowpass(x, fs / 2).samples - x.samples) < 1e-12 * np.linalg.norm(x.samples)
    cutoff = 20.0
    out = ideal_lowpass(ComplexSignal(tone(n, fs, 30.0), fs), cutoff)
    assert np.max(np.abs(out.samples)) < 1e-12
    two = tone(n, fs, 10.0, 0.7) + tone(n, fs, 30.0, 1.3)
    out = ideal_lowpass(ComplexSignal(two, fs), cutoff)
    np.testing.assert_allclose(out.samples, tone(n, fs, 10.0, 0.7), atol=1e-12)
    assert out.sample_rate == fs
    with pytest.raises(ValueError):
        ideal_lowpass(x, fs)


def test_normalize_power():
    np.testing.assert_allclose(normalize_power(ComplexSignal([1, 1, 1, 1], 1.0), 1.0).samples, [1, 1, 1, 1])
    np.testing.assert_allclose(normalize_power(ComplexSignal([2, 0], 1.0), 1.0).samples, [np.sqrt(2), 0])
    p = dbm_to_watt(-10)
    assert p == pytest.approx(1e-4, rel=1e-15)
    x = ComplexSignal(rand_c(np.random.default_rng(2), 1000), 1.0)
    y = normalize_power(x, p)
    assert abs(y.power / p - 1) < 1e-12
    z = normalize_power(y, p)
    assert np.max(np.abs(z.samples - y.samples)) < 1e-12 * np.max(np.abs(y.samples))
    with pytest.raises(DegenerateSignalError):
        normalize_power(ComplexSignal([0, 0], 1.0), 1.0)


def test_welch_pure_tone():
    fs, nseg = 1024.0, 256
    f, psd = welch_psd(ComplexSignal(tone(8192, fs, 64.0), fs), nseg)
    assert psd.max() == 0.0
    assert f[np.argmax(psd)] == pytest.approx(64.0)
    assert np.all(np.diff(f) > 0)


def test_welch_white_noise_flat():
    rng = np.random.default_rng(5)
    nseg = 64
    x = ComplexSignal(rand_c(rng, nseg * 400), 1.0)
    _, psd = welch_psd(x, nseg)
    rel = psd - np.mean(psd)
    assert np.max(np.abs(rel)) < 2.0


def test_welch_two_tones_level_difference():
    fs, nseg, n = 2048.0, 256, 2048 * 16
    x = tone(n, fs, 128.0) + tone(n, fs, -384.0, 0.1)
    f, psd = welch_psd(ComplexSignal(x, fs), nseg)
    p1 = psd[np.argmin(np.abs(f - 128.0))]
    p2 = psd[np.argmin(np.abs(f + 384.0))]
    assert p1 == 0.0
    assert abs((p1 - p2) - 20.0) < 0.5


def test_welch_errors():
    x = ComplexSignal(np.ones(16), 1.0)
    with pytest.raises(ValueError):
        welch_psd(x, 0)
    with pytest.raises(ValueError):
        welch_psd(x, 32)
    with pytest.raises(ValueError):
        welch_psd(x, 8, overlap=1.0)

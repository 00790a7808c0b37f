import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fiberae.channel import ChannelConfig, adc, dac, knl_step, ssfm_propagate
from fiberae.conventional import (
    CdCompensator,
    Constellation,
    cd_compensate,
    conventional_link,
    conventional_receive,
    conventional_tx,
    knl_compensate,
    ml_demap,
    qam_map,
    sinc_shape,
)
from fiberae.metrics import square_qam_ser
from fiberae.signal import ComplexSignal, SymbolBlock, downsample, welch_psd

DESK = dict(f_sim=160e9, n_ssfm_steps=50)


def test_qpsk_points_and_gray_quadrants():
    pts = Constellation.square_qam(4).points
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(pts, s * np.array([-1 - 1j, -1 + 1j, 1 - 1j, 1 + 1j]), atol=1e-15)


@pytest.mark.parametrize("m", [4, 16, 64, 256])
def test_square_qam_unit_power_and_gray_neighbours(m):
    c = Constellation.square_qam(m)
    assert c.avg_power == pytest.approx(1.0, rel=1e-14)
    pts = c.points
    d = np.abs(pts[:, None] - pts[None, :])
    dmin = np.min(d[d > 0])
    for a, b in zip(*np.nonzero(np.isclose(d, dmin))):
        assert bin(int(a) ^ int(b)).count("1") == 1


def test_square_qam_rejects_bad_sizes():
    for m in (2, 8, 9, 36):
        with pytest.raises(ValueError):
            Constellation.square_qam(m)


def test_qam_map_examples():
    c = Constellation.square_qam(16)
    sym = qam_map(SymbolBlock(np.full(10, 5), 16), c, 1.0)
    np.testing.assert_allclose(sym, sym[0])
    assert abs(abs(sym[0]) - 1) < 1e-12
    rng = np.random.default_rng(0)
    sym = qam_map(SymbolBlock.random(4096, 256, rng), Constellation.square_qam(256), 1e-4)
    assert np.mean(np.abs(sym) ** 2) == pytest.approx(1e-4, rel=1e-12)


def test_sinc_single_symbol_is_nyquist():
    osf, n = 8, 256
    sym = np.zeros(n, dtype=complex)
    sym[0] = 1.0
    x = sinc_shape(sym, osf, span=128).samples
    at_symbols = downsample(x, osf, 0)
    expected = np.zeros(n)
    expected[0] = 1
    assert np.max(np.abs(at_symbols - expected)) < 1e-3


def test_sinc_psd_is_brickwall():
    osf, n = 2, 4096
    rng = np.random.default_rng(1)
    sym = np.exp(0.5j * np.pi * rng.integers(0, 4, n))
    x = sinc_shape(sym, osf, span=None, sample_rate=2.0)
    f, psd = welch_psd(x, 256)
    inband = np.abs(f) < 0.4
    outband = np.abs(f) > 0.6
    assert np.ptp(psd[inband]) < 3.0
    assert np.max(psd[outband]) < -20.0


def test_shaped_loopback_recovers_symbols():
    rng = np.random.default_rng(2)
    sym = np.exp(0.5j * np.pi * rng.integers(0, 4, 512)) * np.exp(0.25j * np.pi)
    x = sinc_shape(sym, 4, span=64).samples
    assert np.max(np.abs(downsample(x, 4, 0) - sym)) < 1e-3


def test_cd_filter_design_values():
    nu = CdCompensator.accumulated_dispersion(-21.67e-24, 1000, 20e9)
    assert nu == pytest.approx(-54.46, abs=5e-3)
    comp = CdCompensator.chirp(-21.67e-24, 1000, 20e9)
    assert comp.n_taps == 54
    np.testing.assert_allclose(np.abs(comp.taps), 1 / np.sqrt(abs(nu)), rtol=1e-14)
    assert CdCompensator.chirp(0.0, 1000, 20e9).n_taps == 1


def test_cd_compensate_identity_at_zero_dispersion():
    y = np.random.default_rng(3).standard_normal(64) + 0j
    np.testing.assert_array_equal(cd_compensate(y, 0.0, 1000, 20e9), y)
    with pytest.raises(ValueError):
        cd_compensate(y, -1e-24, 1000, 20e9, method="nope")


def cd_only_samples(span, seed=0, n=512):
    cfg = ChannelConfig(**DESK, enable_awgn=False, enable_knl=False)
    c = Constellation.square_qam(16)
    block = SymbolBlock.random(n, 16, np.random.default_rng(seed))
    x = conventional_tx(block, c, 1e-3, cfg, span=span)
    y = adc(ssfm_propagate(dac(x, cfg), cfg), cfg)
    ref = downsample(x, cfg.osf, 0)
    return cfg, ref, downsample(y, cfg.osf, 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_exact_cd_inverse_for_bandlimited_blocks(seed):
    cfg, ref, y_sam = cd_only_samples(None, seed)
    out = cd_compensate(y_sam, cfg.beta2, cfg.length_km, cfg.bw)
    assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 1e-6


def test_chirp_compensator_is_a_coarse_inverse():
    cfg, ref, y_sam = cd_only_samples(None)
    before = np.linalg.norm(y_sam - ref) / np.linalg.norm(ref)
    out = cd_compensate(y_sam, cfg.beta2, cfg.length_km, cfg.bw, method="chirp")
    gain = np.vdot(out, ref) / np.vdot(out, out)
    after = np.linalg.norm(gain * out - ref) / np.linalg.norm(ref)
    assert after < 0.5 * before


@pytest.mark.parametrize("m", [16, 256])
def test_noiseless_cd_link_recovers_every_symbol(m):
    cfg = ChannelConfig.for_channel("ad", **DESK, enable_awgn=False)
    block = SymbolBlock.random(2048, m, np.random.default_rng(4))
    s_hat = conventional_link(block, cfg, 1e-3, span=None)
    np.testing.assert_array_equal(s_hat.indices, block.indices)


def test_noiseless_cd_link_with_default_pulse():
    cfg = ChannelConfig.for_channel("ad", **DESK, enable_awgn=False)
    block = SymbolBlock.random(2048, 16, np.random.default_rng(5))
    np.testing.assert_array_equal(conventional_link(block, cfg, 1e-3).indices, block.indices)


def test_knl_compensate_examples():
    y = np.array([np.sqrt(1e-3) + 0j])
    assert np.angle(knl_compensate(y, 1.27, 1000)[0]) == pytest.approx(1.27, abs=1e-12)
    z = np.random.default_rng(6).standard_normal(100) * 0.03 + 0j
    np.testing.assert_array_equal(knl_compensate(z, 0.0, 1000), z)
    fwd = knl_step(ComplexSignal(z, 1.0), 1.27, 1000).samples
    assert np.max(np.abs(knl_compensate(fwd, 1.27, 1000) - z)) < 1e-12 * np.max(np.abs(z))


@pytest.mark.parametrize("m", [4, 16, 256])
def test_ml_demap_identity_on_points(m):
    c = Constellation.square_qam(m)
    np.testing.assert_array_equal(ml_demap(c.points, c).indices, np.arange(m))
    np.testing.assert_array_equal(ml_demap(3.0 * c.points, c, scale=9.0).indices, np.arange(m))


def test_ml_demap_tie_goes_to_lower_index():
    c = Constellation.square_qam(4)
    mid = 0.5 * (c.points[1] + c.points[3])
    assert ml_demap([mid], c).indices[0] == 1
    assert ml_demap([0j], c).indices[0] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_ml_demap_scale_consistent(seed, alpha):
    c = Constellation.square_qam(16)
    y = np.random.default_rng(seed).standard_normal(200) + 1j * np.random.default_rng(seed + 1).standard_normal(200)
    a = ml_demap(y, c).indices
    b = ml_demap(alpha * y, c, scale=alpha**2).indices
    np.testing.assert_array_equal(a, b)


def test_ml_demap_awgn_ser_matches_analytic():
    m, snr = 256, 10**3.0
    n = 10**6
    rng = np.random.default_rng(7)
    c = Constellation.square_qam(m)
    s = rng.integers(0, m, n)
    noise = np.sqrt(0.5 / snr) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    ser = np.mean(ml_demap(c.points[s] + noise, c).indices != s)
    ref = square_qam_ser(snr, m)
    sigma = np.sqrt(ref * (1 - ref) / n)
    assert abs(ser - ref) < 3 * sigma


def test_link_with_everything_off_is_exact():
    cfg = ChannelConfig(**DESK, enable_awgn=False, enable_cd=False, enable_knl=False)
    block = SymbolBlock.random(512, 256, np.random.default_rng(8))
    np.testing.assert_array_equal(conventional_link(block, cfg, 1e-3).indices, block.indices)


def test_receive_returns_symbol_rate_samples():
    cfg = ChannelConfig(**DESK, enable_awgn=False, enable_cd=False, enable_knl=False)
    c = Constellation.square_qam(16)
    block = SymbolBlock.random(256, 16, np.random.default_rng(9))
    x = conventional_tx(block, c, 1e-3, cfg)
    s_hat, y_sam = conventional_receive(adc(x, cfg), c, 1e-3, cfg)
    assert y_sam.shape == (256,)
    np.testing.assert_array_equal(s_hat.indices, block.indices)

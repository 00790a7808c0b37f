"""Single-polarisation NLSE fiber channel solved with the symmetric split-step Fourier method.

Attenuation is assumed perfectly compensated by ideal distributed amplification,
so ``alpha`` only enters through the ASE noise density.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .signal import ComplexSignal, Spectrum, frequency_grid, ideal_lowpass

__all__ = [
    "ChannelConfig",
    "NoiseModel",
    "substream",
    "cd_transfer",
    "cd_step",
    "knl_step",
    "ase_noise_step",
    "ssfm_propagate",
    "linear_propagate",
    "dac",
    "adc",
    "estimate_max_bandwidth",
]


@dataclass(frozen=True)
class ChannelConfig:
    """Physical and simulation parameters. Units: s, Hz, km, W."""

    h: float = 6.626e-34
    f0: float = 193.55e12
    alpha: float = 0.046          # 1/km
    beta2: float = -21.67e-24     # s^2/km
    gamma: float = 1.27           # 1/(W km)
    n_sp: float = 1.0
    length_km: float = 1000.0
    n_ssfm_steps: int = 200
    f_sim: float = 1e12
    bw: float = 20e9
    enable_awgn: bool = True
    enable_cd: bool = True
    enable_knl: bool = True

    def __post_init__(self):
        if self.n_ssfm_steps < 1 or not self.length_km > 0:
            raise ValueError("need length_km > 0 and n_ssfm_steps >= 1")
        if not (self.f_sim > 0 and self.bw > 0):
            raise ValueError("f_sim and bw must be positive")
        ratio = self.f_sim / self.bw
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError(f"f_sim / bw = {ratio} must be an integer")

    @classmethod
    def for_channel(cls, name: str, **overrides) -> "ChannelConfig":
        """``name`` is one of ``"a"``, ``"ad"``, ``"adn"`` (impairments AWGN, CD, KNL)."""
        toggles = {
            "a": (True, False, False),
            "ad": (True, True, False),
            "adn": (True, True, True),
        }
        try:
            awgn, cd, knl = toggles[name.lower()]
        except KeyError:
            raise ValueError(f"unknown channel {name!r}; expected one of a, ad, adn") from None
        params = dict(enable_awgn=awgn, enable_cd=cd, enable_knl=knl)
        params.update(overrides)
        return cls(**params)

    @property
    def dz(self) -> float:
        return self.length_km / self.n_ssfm_steps

    @property
    def symbol_rate(self) -> float:
        return self.bw

    @property
    def osf(self) -> int:
        return int(round(self.f_sim / self.bw))

    @property
    def noise(self) -> "NoiseModel":
        return NoiseModel.from_config(self)

    def replace(self, **changes) -> "ChannelConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseModel:
    rho_n: float            # W / (Hz km)
    sigma2_per_step: float  # W

    @classmethod
    def from_config(cls, cfg: ChannelConfig) -> "NoiseModel":
        rho_n = cfg.n_sp * cfg.h * cfg.f0 * cfg.alpha
        return cls(rho_n, rho_n * cfg.dz * cfg.f_sim)


def substream(seed, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; same inputs give the same stream."""
    entropy = seed if isinstance(seed, (int, np.integer)) else list(seed)
    return np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=tuple(keys)))


def cd_transfer(n: int, sample_rate: float, beta2: float, dz_km: float) -> np.ndarray:
    """Per-bin CD factor ``exp(-j/2 beta2 w^2 dz)`` in unshifted FFT order."""
    w = 2 * np.pi * frequency_grid(n, sample_rate)
    return np.exp(-0.5j * beta2 * w**2 * dz_km)


def cd_step(spec: Spectrum, beta2: float, dz_km: float) -> Spectrum:
    h = cd_transfer(spec.bins.size, spec.bin_spacing * spec.bins.size, beta2, dz_km)
    return Spectrum(spec.bins * h, spec.bin_spacing, spec.unitary)


def knl_step(sig: ComplexSignal, gamma: float, dz_km: float) -> ComplexSignal:
    q = sig.samples
    return sig.with_samples(q * np.exp(-1j * gamma * np.abs(q) ** 2 * dz_km))


def _complex_gaussian(n: int, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    return np.sqrt(sigma2 / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def ase_noise_step(sig: ComplexSignal, sigma2: float, rng: np.random.Generator) -> ComplexSignal:
    """Add circularly-symmetric complex Gaussian noise of total variance ``sigma2``."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    if sigma2 == 0:
        return sig
    return sig.with_samples(sig.samples + _complex_gaussian(len(sig), sigma2, rng))


def step_noise(cfg: ChannelConfig, n: int, seed, step: int) -> np.ndarray:
    """Noise realisation injected after SSFM step ``step``; shared with the differentiable channel."""
    return _complex_gaussian(n, cfg.noise.sigma2_per_step, substream(seed, step))


def ssfm_propagate(sig: ComplexSignal, cfg: ChannelConfig, seed=0) -> ComplexSignal:
    """Propagate ``sig`` over the fiber.

    Each of the ``n_ssfm_steps`` steps applies half-step CD, full-step Kerr
    rotation, half-step CD, then adds ASE noise. Disabled impairments are
    skipped. Noise for step ``k`` is drawn from ``substream(seed, k)``.
    """
    if not np.isclose(sig.sample_rate, cfg.f_sim, rtol=1e-12, atol=0):
        raise ValueError(f"signal rate {sig.sample_rate} Hz does not match f_sim {cfg.f_sim} Hz")
    q = sig.samples.copy()
    n = q.size
    dz = cfg.dz
    half_cd = cd_transfer(n, cfg.f_sim, cfg.beta2, dz / 2) if cfg.enable_cd else None
    for k in range(cfg.n_ssfm_steps):
        if half_cd is not None:
            q = np.fft.ifft(np.fft.fft(q) * half_cd)
        if cfg.enable_knl:
            q = q * np.exp(-1j * cfg.gamma * (q.real**2 + q.imag**2) * dz)
        if half_cd is not None:
            q = np.fft.ifft(np.fft.fft(q) * half_cd)
        if cfg.enable_awgn:
            q = q + step_noise(cfg, n, seed, k)
    return sig.with_samples(q)


def linear_propagate(sig: ComplexSignal, cfg: ChannelConfig) -> ComplexSignal:
    """Noise-free, Kerr-free propagation: the whole-length CD filter applied once."""
    h = cd_transfer(len(sig), sig.sample_rate, cfg.beta2, cfg.length_km)
    return sig.with_samples(np.fft.ifft(np.fft.fft(sig.samples) * h))


def dac(sig: ComplexSignal, cfg: ChannelConfig) -> ComplexSignal:
    return ideal_lowpass(sig, cfg.bw)


def adc(sig: ComplexSignal, cfg: ChannelConfig) -> ComplexSignal:
    return ideal_lowpass(sig, cfg.bw)


def estimate_max_bandwidth(cfg: ChannelConfig, p_max: float) -> float:
    """Approximate peak bandwidth after Kerr broadening, ``0.86 gamma (2 P_max) l B_w``."""
    if not p_max > 0:
        raise ValueError("p_max must be positive")
    return 0.86 * cfg.gamma * (2 * p_max) * cfg.length_km * cfg.bw

"""Baseline coherent transceiver: square QAM, Nyquist shaping, CD FIR and Kerr back-rotation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelConfig, adc, dac, ssfm_propagate
from .signal import (
    ComplexSignal,
    SymbolBlock,
    circular_convolve,
    downsample,
    fir_filter,
    frequency_grid,
    ideal_lowpass,
    normalize_power,
    upsample,
)

__all__ = [
    "Constellation",
    "CdCompensator",
    "qam_map",
    "sinc_taps",
    "sinc_shape",
    "periodic_nyquist_kernel",
    "conventional_tx",
    "cd_compensate",
    "knl_compensate",
    "ml_demap",
    "conventional_receive",
    "conventional_link",
]


def _gray_to_binary(g: np.ndarray) -> np.ndarray:
    b = g.copy()
    shift = g >> 1
    while shift.any():
        b ^= shift
        shift >>= 1
    return b


@dataclass(frozen=True)
class Constellation:
    """``points[m]`` is the complex symbol for label ``m``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.complex128)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a constellation needs at least two points")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.size

    @property
    def avg_power(self) -> float:
        return float(np.mean(np.abs(self.points) ** 2))

    def normalized(self) -> "Constellation":
        return Constellation(self.points / np.sqrt(self.avg_power))

    @classmethod
    def square_qam(cls, m: int) -> "Constellation":
        """Unit-power square QAM, Gray labelled per axis (label = i_bits * L + q_bits)."""
        side = int(round(np.sqrt(m)))
        if side * side != m or side < 2 or side & (side - 1):
            raise ValueError(f"M={m} is not the square of a power of two")
        labels = np.arange(m)
        pos_i = _gray_to_binary(labels // side)
        pos_q = _gray_to_binary(labels % side)
        levels = 2 * np.arange(side) - (side - 1)
        return cls(levels[pos_i] + 1j * levels[pos_q]).normalized()

    @classmethod
    def from_embedding(cls, w) -> "Constellation":
        w = np.asarray(w, dtype=float)
        return cls(w[:, 0] + 1j * w[:, 1])

    def embedding(self) -> np.ndarray:
        return np.stack([self.points.real, self.points.imag], axis=1)


def qam_map(block: SymbolBlock, c: Constellation, launch_power: float) -> np.ndarray:
    """Look up each label, then scale so the block's mean symbol power is ``launch_power``."""
    if block.alphabet_size > c.size or (len(block) and block.indices.max() >= c.size):
        raise ValueError(f"labels exceed the constellation size {c.size}")
    sym = c.points[block.indices]
    return normalize_power(ComplexSignal(sym, 1.0), launch_power).samples


def sinc_taps(osf: int, span: int) -> np.ndarray:
    """Truncated sinc ``sinc(k/osf)`` for ``|k| <= span*osf/2``; centre tap is index ``len//2``."""
    if osf < 2 or span < 1:
        raise ValueError("need osf >= 2 and span >= 1")
    half = span * osf // 2
    return np.sinc(np.arange(-half, half + 1) / osf).astype(np.complex128)


def periodic_nyquist_kernel(n_sym: int, osf: int) -> np.ndarray:
    """Circular limit of the sinc pulse over a block of ``n_sym`` symbols.

    Its DFT is flat below half the symbol rate; for even ``n_sym`` the bin at
    exactly half the symbol rate gets weight 1/2 on each side, which keeps the
    pulse zero at every other symbol instant.
    """
    n = n_sym * osf
    k = np.abs(np.fft.fftfreq(n, 1.0 / n))
    half = n_sym / 2
    h = np.where(k < half, 1.0, np.where(k == half, 0.5, 0.0))
    return np.fft.ifft(h) * osf


def sinc_shape(symbols, osf: int, span: int | None = 64, sample_rate: float | None = None) -> ComplexSignal:
    """Upsample by ``osf`` and filter with a truncated sinc spanning ``span`` symbols.

    ``span=None`` uses the full-block periodic pulse instead, which is exactly
    band-limited to half the symbol rate.
    """
    up = upsample(symbols, osf, sample_rate)
    if span is None:
        kernel = periodic_nyquist_kernel(len(up) // osf, osf)
        return up.with_samples(np.fft.ifft(np.fft.fft(up.samples) * np.fft.fft(kernel)))
    taps = sinc_taps(osf, span)
    return fir_filter(up, taps, center=taps.size // 2)


def conventional_tx(
    block: SymbolBlock,
    c: Constellation,
    launch_power: float,
    cfg: ChannelConfig,
    span: int | None = 64,
) -> ComplexSignal:
    """Map, Nyquist-shape, band-limit to ``bw`` and set the launch power exactly."""
    sym = qam_map(block, c, launch_power)
    x = sinc_shape(sym, cfg.osf, span, cfg.f_sim)
    return normalize_power(ideal_lowpass(x, cfg.bw), launch_power)


@dataclass(frozen=True)
class CdCompensator:
    """Symbol-rate circular FIR undoing accumulated chromatic dispersion.

    ``center`` is the tap that lands on zero delay.
    """

    taps: np.ndarray
    center: int
    nu: float

    @staticmethod
    def accumulated_dispersion(beta2: float, length_km: float, bw: float) -> float:
        return 2 * np.pi * beta2 * length_km * bw**2

    @classmethod
    def chirp(cls, beta2: float, length_km: float, bw: float) -> "CdCompensator":
        """Time-domain chirp design with ``floor(|nu|)`` taps of magnitude ``1/sqrt(|nu|)``.

        The constant phase is taken from ``sqrt(j/nu)`` and the taps are
        centred on an integer index so that the filter adds no fractional delay.
        """
        nu = cls.accumulated_dispersion(beta2, length_km, bw)
        n_taps = int(np.floor(abs(nu)))
        if n_taps == 0:
            return cls(np.ones(1, dtype=np.complex128), 0, nu)
        center = (n_taps - 1) // 2
        d = np.arange(n_taps) - center
        taps = np.sqrt(1j / nu + 0j) * np.exp(-1j * np.pi / nu * d**2)
        return cls(taps, center, nu)

    @classmethod
    def exact(cls, n: int, beta2: float, length_km: float, bw: float) -> "CdCompensator":
        """Full-block circular FIR whose DFT is exactly ``exp(+j/2 beta2 w^2 l)`` at symbol rate."""
        nu = cls.accumulated_dispersion(beta2, length_km, bw)
        if nu == 0:
            return cls(np.ones(1, dtype=np.complex128), 0, nu)
        w = 2 * np.pi * frequency_grid(n, bw)
        taps = np.fft.ifft(np.exp(0.5j * beta2 * w**2 * length_km))
        return cls(taps, 0, nu)

    @property
    def n_taps(self) -> int:
        return self.taps.size

    def __call__(self, y_sam) -> np.ndarray:
        return circular_convolve(y_sam, self.taps, self.center)


def cd_compensate(y_sam, beta2: float, length_km: float, bw: float, method: str = "exact") -> np.ndarray:
    """Undo CD on a symbol-rate block.

    ``method="chirp"`` uses the ``floor(|nu|)``-tap time-domain design,
    ``method="exact"`` the full-block all-pass inverse.
    """
    y_sam = np.asarray(y_sam, dtype=np.complex128)
    if beta2 == 0:
        return y_sam.copy()
    if method == "chirp":
        comp = CdCompensator.chirp(beta2, length_km, bw)
    elif method == "exact":
        comp = CdCompensator.exact(y_sam.size, beta2, length_km, bw)
    else:
        raise ValueError(f"unknown CD compensation method {method!r}")
    return comp(y_sam)


def knl_compensate(y_cd, gamma: float, length_km: float) -> np.ndarray:
    y = np.asarray(y_cd, dtype=np.complex128)
    return y * np.exp(1j * gamma * np.abs(y) ** 2 * length_km)


def ml_demap(symbols, c: Constellation, scale: float = 1.0) -> SymbolBlock:
    """Minimum-distance decisions against ``sqrt(scale) * c.points``.

    Ties go to the lowest label (``argmin`` returns the first minimum).
    """
    y = np.asarray(symbols, dtype=np.complex128)
    pts = np.sqrt(scale) * c.points
    out = np.empty(y.size, dtype=np.int64)
    chunk = max(1, 2**20 // c.size)
    for i in range(0, y.size, chunk):
        d = np.abs(y[i:i + chunk, None] - pts[None, :]) ** 2
        out[i:i + chunk] = np.argmin(d, axis=1)
    return SymbolBlock(out, c.size)


def conventional_receive(
    y: ComplexSignal,
    c: Constellation,
    launch_power: float,
    cfg: ChannelConfig,
    cd_method: str = "exact",
) -> tuple[SymbolBlock, np.ndarray]:
    """ADC output to decisions. Also returns the equalised symbol-rate samples."""
    y_sam = downsample(y, cfg.osf, 0)
    if cfg.enable_cd:
        y_sam = cd_compensate(y_sam, cfg.beta2, cfg.length_km, cfg.bw, method=cd_method)
    if cfg.enable_knl:
        y_sam = knl_compensate(y_sam, cfg.gamma, cfg.length_km)
    return ml_demap(y_sam, c, launch_power), y_sam


def conventional_link(
    block: SymbolBlock,
    cfg: ChannelConfig,
    launch_power: float,
    seed=0,
    constellation: Constellation | None = None,
    span: int = 64,
    cd_method: str = "exact",
) -> SymbolBlock:
    """TX DSP, DAC, fiber, ADC and RX DSP for one block; returns the decided labels."""
    c = constellation or Constellation.square_qam(block.alphabet_size)
    x = conventional_tx(block, c, launch_power, cfg, span)
    y = adc(ssfm_propagate(dac(x, cfg), cfg, seed), cfg)
    s_hat, _ = conventional_receive(y, c, launch_power, cfg, cd_method)
    return s_hat

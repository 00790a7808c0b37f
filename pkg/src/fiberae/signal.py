"""Complex-baseband signal primitives.

All block operations are circular: a block of ``N`` samples is treated as one
period of a periodic waveform. Forward and inverse FFTs are unitary
(``1/sqrt(N)`` in both directions).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

__all__ = [
    "ComplexSignal",
    "Spectrum",
    "SymbolBlock",
    "DegenerateSignalError",
    "dbm_to_watt",
    "watt_to_dbm",
    "mean_power",
    "frequency_grid",
    "fft",
    "ifft",
    "upsample",
    "downsample",
    "circular_convolve",
    "fir_filter",
    "lowpass_mask",
    "ideal_lowpass",
    "normalize_power",
    "welch_psd",
]


class DegenerateSignalError(ValueError):
    """Raised when an operation needs signal energy but the input has none."""


@dataclass(frozen=True)
class ComplexSignal:
    """Uniformly sampled complex baseband waveform.

    ``|samples|**2`` is instantaneous power in watts.
    """

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.complex128)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def power(self) -> float:
        return mean_power(self.samples)

    def with_samples(self, samples) -> "ComplexSignal":
        return ComplexSignal(samples, self.sample_rate)


@dataclass(frozen=True)
class Spectrum:
    """Unitary DFT of a :class:`ComplexSignal`, DC in bin 0."""

    bins: np.ndarray
    bin_spacing: float
    unitary: bool = True

    @property
    def frequencies(self) -> np.ndarray:
        return np.fft.fftfreq(self.bins.size, d=1.0 / (self.bin_spacing * self.bins.size))


@dataclass(frozen=True)
class SymbolBlock:
    indices: np.ndarray
    alphabet_size: int

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 1:
            raise ValueError("indices must be 1-D")
        if not np.issubdtype(idx.dtype, np.integer):
            raise ValueError("indices must be integers")
        if idx.size and (idx.min() < 0 or idx.max() >= self.alphabet_size):
            raise ValueError(f"indices must lie in [0, {self.alphabet_size})")
        object.__setattr__(self, "indices", idx.astype(np.int64))

    def __len__(self):
        return self.indices.size

    @classmethod
    def random(cls, n: int, alphabet_size: int, rng: np.random.Generator) -> "SymbolBlock":
        return cls(rng.integers(0, alphabet_size, size=n), alphabet_size)


def dbm_to_watt(p_dbm):
    return 1e-3 * 10.0 ** (np.asarray(p_dbm, dtype=float) / 10.0)


def watt_to_dbm(p_w):
    return 10.0 * np.log10(np.asarray(p_w, dtype=float) / 1e-3)


def mean_power(x) -> float:
    x = np.asarray(x)
    return float(np.mean(np.abs(x) ** 2))


def frequency_grid(n: int, sample_rate: float) -> np.ndarray:
    """Signed baseband frequency of each FFT bin (Hz), unshifted order."""
    return np.fft.fftfreq(n, d=1.0 / sample_rate)


def fft(sig: ComplexSignal) -> Spectrum:
    if len(sig.samples) == 0:
        raise ValueError("empty signal")
    n = len(sig)
    return Spectrum(np.fft.fft(sig.samples, norm="ortho"), sig.sample_rate / n)


def ifft(spec: Spectrum) -> ComplexSignal:
    bins = np.asarray(spec.bins)
    if bins.size == 0:
        raise ValueError("empty spectrum")
    return ComplexSignal(np.fft.ifft(bins, norm="ortho"), spec.bin_spacing * bins.size)


def upsample(symbols, factor: int, sample_rate: float | None = None) -> ComplexSignal:
    """Zero-insertion upsampling.

    ``sample_rate`` is the rate of the *output*; when omitted it is taken to be
    ``factor`` (i.e. unit symbol rate).
    """
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    symbols = np.asarray(symbols, dtype=np.complex128)
    out = np.zeros(symbols.size * factor, dtype=np.complex128)
    out[::factor] = symbols
    return ComplexSignal(out, float(factor) if sample_rate is None else sample_rate)


def downsample(sig: ComplexSignal | np.ndarray, factor: int, offset: int = 0) -> np.ndarray:
    x = sig.samples if isinstance(sig, ComplexSignal) else np.asarray(sig)
    if factor < 1:
        raise ValueError(f"downsampling factor must be >= 1, got {factor}")
    if not 0 <= offset < factor:
        raise ValueError(f"offset must satisfy 0 <= offset < factor, got {offset}")
    if x.size % factor:
        raise ValueError(f"signal length {x.size} is not divisible by {factor}")
    return x[offset::factor].copy()


def _tap_kernel(taps: np.ndarray, n: int, center: int) -> np.ndarray:
    kernel = np.zeros(n, dtype=np.complex128)
    np.add.at(kernel, (np.arange(taps.size) - center) % n, taps)
    return kernel


def circular_convolve(x: np.ndarray, taps, center: int = 0) -> np.ndarray:
    """``y[n] = sum_k taps[k] * x[(n - (k - center)) mod N]`` computed via FFT."""
    x = np.asarray(x, dtype=np.complex128)
    taps = np.asarray(taps, dtype=np.complex128)
    if taps.size == 0:
        raise ValueError("taps must be non-empty")
    if taps.size > x.size:
        raise ValueError(f"{taps.size} taps exceed the block length {x.size}")
    kernel = _tap_kernel(taps, x.size, center)
    return np.fft.ifft(np.fft.fft(x) * np.fft.fft(kernel))


def fir_filter(sig: ComplexSignal, taps, center: int = 0) -> ComplexSignal:
    """Circular FIR filter. ``center`` is the tap index that lands on zero delay."""
    return sig.with_samples(circular_convolve(sig.samples, taps, center))


def lowpass_mask(n: int, sample_rate: float, cutoff: float) -> np.ndarray:
    if not 0 < cutoff <= sample_rate / 2:
        raise ValueError(f"cutoff {cutoff} Hz must lie in (0, {sample_rate / 2}] Hz")
    f = frequency_grid(n, sample_rate)
    # tolerance keeps bins that sit exactly on the cutoff
    return (np.abs(f) <= cutoff * (1 + 1e-12)).astype(float)


def ideal_lowpass(sig: ComplexSignal, cutoff: float) -> ComplexSignal:
    """Brickwall low-pass: bins with ``|f| <= cutoff`` pass unchanged, the rest are zeroed."""
    mask = lowpass_mask(len(sig), sig.sample_rate, cutoff)
    return sig.with_samples(np.fft.ifft(np.fft.fft(sig.samples) * mask))


def normalize_power(sig: ComplexSignal, target_power: float) -> ComplexSignal:
    if not target_power > 0:
        raise ValueError(f"target_power must be positive, got {target_power}")
    p = sig.power
    if p == 0:
        raise DegenerateSignalError("cannot normalize an all-zero signal")
    return sig.with_samples(sig.samples * np.sqrt(target_power / p))


def welch_psd(sig: ComplexSignal, segment_len: int = 2048, overlap: float = 0.5):
    """Peak-normalised two-sided PSD estimate (Hann window).

    Returns ``(freq_hz, psd_db)`` with DC centred and the largest bin at 0 dB.
    """
    if segment_len < 1:
        raise ValueError("segment_len must be positive")
    if segment_len > len(sig):
        raise ValueError(f"segment_len {segment_len} exceeds signal length {len(sig)}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    f, pxx = sps.welch(
        sig.samples,
        fs=sig.sample_rate,
        window="hann",
        nperseg=segment_len,
        noverlap=int(round(overlap * segment_len)),
        detrend=False,
        return_onesided=False,
        scaling="density",
    )
    f = np.fft.fftshift(f)
    pxx = np.fft.fftshift(pxx)
    peak = pxx.max()
    if peak <= 0:
        raise DegenerateSignalError("signal has no energy")
    with np.errstate(divide="ignore"):
        psd_db = 10.0 * np.log10(pxx / peak)
    return f, psd_db

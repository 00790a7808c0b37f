"""Information-theoretic figures of merit: plug-in MI, SE, SNR and reference capacities."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erfc, logsumexp

from .channel import ChannelConfig, substream
from .signal import SymbolBlock

__all__ = [
    "MiEstimate",
    "entropy_bits",
    "estimate_mi",
    "symbol_error_rate",
    "spectral_efficiency",
    "snr",
    "snr_db",
    "awgn_capacity",
    "qam_symbolwise_capacity",
    "square_qam_ser",
    "plugin_mi_bias",
]


@dataclass(frozen=True)
class MiEstimate:
    mi_bits: float
    n_samples: int
    h_s: float
    h_shat: float
    h_joint: float


def entropy_bits(counts) -> float:
    """Plug-in entropy of an empirical histogram, ``0 log 0 = 0``."""
    counts = np.asarray(counts, dtype=float).ravel()
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def _labels(x) -> tuple[np.ndarray, int]:
    if isinstance(x, SymbolBlock):
        return x.indices, x.alphabet_size
    x = np.asarray(x, dtype=np.int64)
    return x, int(x.max()) + 1 if x.size else 0


def estimate_mi(s, s_hat) -> MiEstimate:
    """MI between sent and decided labels from their joint histogram.

    ``MI = H(s) + H(s_hat) - H(s, s_hat)``; no bias correction.
    """
    a, ma = _labels(s)
    b, mb = _labels(s_hat)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("need at least one sample")
    m = max(ma, mb)
    joint = np.bincount(a * m + b, minlength=m * m).reshape(m, m)
    h_s = entropy_bits(joint.sum(axis=1))
    h_shat = entropy_bits(joint.sum(axis=0))
    h_joint = entropy_bits(joint)
    # clamp fp residue so an identity channel reports exactly H(s)
    mi = max(0.0, h_s + h_shat - h_joint)
    return MiEstimate(mi, int(a.size), h_s, h_shat, h_joint)


def plugin_mi_bias(m: int, n: int) -> float:
    """Leading-order positive bias of the plug-in MI for independent uniform labels."""
    return (m - 1) ** 2 / (2 * n * np.log(2))


def symbol_error_rate(s, s_hat) -> float:
    a, _ = _labels(s)
    b, _ = _labels(s_hat)
    if a.size != b.size:
        raise ValueError("length mismatch")
    return float(np.mean(a != b))


def spectral_efficiency(mi_bits: float, symbol_duration: float, bw: float) -> float:
    if not (symbol_duration > 0 and bw > 0):
        raise ValueError("symbol duration and bandwidth must be positive")
    return mi_bits / (symbol_duration * bw)


def snr(launch_power: float, cfg: ChannelConfig) -> float:
    """``P / (rho_n l B_w)``: launch power over ASE power accumulated in the signal band."""
    if not launch_power > 0:
        raise ValueError("launch power must be positive")
    return launch_power / (cfg.noise.rho_n * cfg.length_km * cfg.bw)


def snr_db(launch_power: float, cfg: ChannelConfig) -> float:
    return 10 * np.log10(snr(launch_power, cfg))


def awgn_capacity(snr_lin) -> float:
    return np.log2(1 + np.asarray(snr_lin, dtype=float))


def square_qam_ser(snr_lin: float, m: int) -> float:
    """Exact symbol error rate of Gray square M-QAM over complex AWGN (Es/N0 = ``snr_lin``)."""
    q = 0.5 * erfc(np.sqrt(3 * snr_lin / (m - 1)) / np.sqrt(2))
    p_axis = 2 * (1 - 1 / np.sqrt(m)) * q
    return float(1 - (1 - p_axis) ** 2)


def qam_symbolwise_capacity(snr_lin: float, m: int, n_mc: int = 200_000, seed=0) -> tuple[float, float]:
    """MI of equiprobable square M-QAM over complex AWGN, by Monte Carlo.

    Returns ``(bits, standard_error)``.
    """
    return _qam_capacity_cached(float(snr_lin), int(m), int(n_mc), seed)


@lru_cache(maxsize=1024)
def _qam_capacity_cached(snr_lin: float, m: int, n_mc: int, seed) -> tuple[float, float]:
    from .conventional import Constellation

    if snr_lin <= 0:
        return 0.0, 0.0
    pts = Constellation.square_qam(m).points
    rng = substream(seed, 7919)
    n0 = 1.0 / snr_lin
    # integer draws per label keep the label distribution exactly uniform
    reps = max(1, n_mc // m)
    x = np.repeat(np.arange(m), reps)
    noise = np.sqrt(n0 / 2) * (rng.standard_normal(x.size) + 1j * rng.standard_normal(x.size))
    samples = np.empty(x.size)
    chunk = max(1, 2**20 // m)
    for i in range(0, x.size, chunk):
        xs = x[i:i + chunk]
        y = pts[xs] + noise[i:i + chunk]
        metric = -np.abs(y[:, None] - pts[None, :]) ** 2 / n0
        own = -np.abs(noise[i:i + chunk]) ** 2 / n0
        # log2 M - log2 sum_k exp(metric_k - own)
        samples[i:i + chunk] = np.log2(m) - (logsumexp(metric, axis=1) - own) / np.log(2)
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(samples.size))

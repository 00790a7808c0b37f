"""End-to-end trainable transceiver: embedding mapper + FIR pulse shaper, windowed DNN demapper.

The TX mirrors the conventional chain (map, normalise, upsample, filter,
low-pass, set launch power) with the constellation and the filter taps left
trainable. Training back-propagates a cross-entropy loss through the
split-step channel on an :class:`~fiberae.autodiff.Tape`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .channel import (
    ChannelConfig,
    adc,
    cd_transfer,
    dac,
    linear_propagate,
    ssfm_propagate,
    step_noise,
    substream,
)
from .conventional import Constellation, sinc_taps
from .metrics import estimate_mi, spectral_efficiency, symbol_error_rate
from .signal import ComplexSignal, circular_convolve, ideal_lowpass, lowpass_mask

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_HIDDEN",
    "AeTxParams",
    "AeRxParams",
    "TrainConfig",
    "TrainResult",
    "DivergenceError",
    "ConfigMismatchError",
    "desk_channel",
    "ae_tx_var",
    "ae_tx",
    "lowpass_var",
    "knl_var",
    "ssfm_var",
    "ae_rx_logits",
    "ae_rx",
    "train_step",
    "train",
    "evaluate",
    "pulse_response",
    "combined_symbol_response",
    "export_learned_artifacts",
    "load_embedding",
    "load_pulse",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_HIDDEN = (2048, 512, 512, 512, 512, 512)
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class ConfigMismatchError(ValueError):
    """A checkpoint was written for a different configuration."""


def desk_channel(channel: str = "adn", **overrides) -> ChannelConfig:
    """Reduced-rate channel for CPU runs: 160 GHz simulation rate, 50 split steps."""
    params = dict(f_sim=160e9, n_ssfm_steps=50)
    params.update(overrides)
    return ChannelConfig.for_channel(channel, **params)


# -- parameters ---------------------------------------------------------------

@dataclass
class AeTxParams:
    w: np.ndarray   # (M, 2) real/imag rows
    f: np.ndarray   # (L_F,) complex taps at f_sim, centre tap at L_F // 2

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.f = np.asarray(self.f, dtype=np.complex128)
        if self.w.ndim != 2 or self.w.shape[1] != 2:
            raise ValueError(f"embedding must be (M, 2), got {self.w.shape}")
        if self.f.size % 2 == 0:
            raise ValueError("shaper length must be odd")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.f))):
            raise ValueError("non-finite TX parameters")

    @property
    def center(self) -> int:
        return self.f.size // 2

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @classmethod
    def init(cls, m: int, osf: int, n_taps: int | None = None, rng=None) -> "AeTxParams":
        """Random uniform constellation, truncated-sinc shaper."""
        rng = rng if rng is not None else np.random.default_rng(0)
        n_taps = n_taps or 64 * osf + 1
        span = (n_taps - 1) // osf
        if span * osf + 1 != n_taps:
            raise ValueError("n_taps must be span * osf + 1")
        return cls(rng.uniform(-1.0, 1.0, size=(m, 2)), sinc_taps(osf, span))

    @classmethod
    def conventional(cls, m: int, osf: int, span: int = 64) -> "AeTxParams":
        return cls(Constellation.square_qam(m).embedding(), sinc_taps(osf, span))

    @property
    def constellation(self) -> Constellation:
        return Constellation.from_embedding(self.w).normalized()


@dataclass
class AeRxParams:
    weights: list  # [(W_i, b_i), ...]

    @classmethod
    def init(cls, n_adj: int, m: int, hidden=DEFAULT_HIDDEN, rng=None) -> "AeRxParams":
        """Glorot-uniform weights, zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [2 * (2 * n_adj + 1), *hidden, m]
        weights = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (d_in + d_out))
            weights.append((rng.uniform(-lim, lim, size=(d_in, d_out)), np.zeros(d_out)))
        return cls(weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0][0].shape[0]

    @property
    def m(self) -> int:
        return self.weights[-1][0].shape[1]


def _flatten(tx: AeTxParams, rx: AeRxParams) -> dict:
    p = {"W": tx.w.copy(), "F": ad.from_complex(tx.f)}
    for i, (w, b) in enumerate(rx.weights):
        p[f"dense{i}.w"] = w
        p[f"dense{i}.b"] = b
    return p


def _unflatten(p: dict, n_layers: int) -> tuple[AeTxParams, AeRxParams]:
    tx = AeTxParams(p["W"], ad.to_complex(p["F"]))
    rx = AeRxParams([(p[f"dense{i}.w"], p[f"dense{i}.b"]) for i in range(n_layers)])
    return tx, rx


# -- differentiable pipeline --------------------------------------------------

def lowpass_var(x: ad.Var, cfg: ChannelConfig) -> ad.Var:
    mask = lowpass_mask(x.shape[0], cfg.f_sim, cfg.bw)
    return ad.ifft(ad.mask_multiply(ad.fft(x), mask))


def ae_tx_var(s, w: ad.Var, f: ad.Var, launch_power: float, cfg: ChannelConfig) -> ad.Var:
    """Labels to launched waveform (N_B * osf, 2).

    Order matters: the low-pass comes before the final power normalisation,
    so out-of-band energy costs launch power instead of being filtered away
    after the fact.
    """
    c = ad.gather(w, s)
    c = ad.power_normalize(c, 1.0)
    up = ad.upsample(c, cfg.osf)
    x = ad.circular_fir(up, f, center=f.shape[0] // 2)
    x = lowpass_var(x, cfg)
    return ad.power_normalize(x, launch_power)


def ae_tx(s, tx: AeTxParams, launch_power: float, cfg: ChannelConfig) -> ComplexSignal:
    tape = ad.Tape()
    x = ae_tx_var(np.asarray(s), tape.constant(tx.w), tape.constant(ad.from_complex(tx.f)), launch_power, cfg)
    return ComplexSignal(ad.to_complex(x.value), cfg.f_sim)


def knl_var(q: ad.Var, gamma: float, dz: float) -> ad.Var:
    theta = ad.scale(ad.abs2(q), -gamma * dz)
    return ad.cmul(q, ad.exp_j(theta))


def ssfm_var(q: ad.Var, cfg: ChannelConfig, seed=0) -> ad.Var:
    """Same scheme and noise realisation as :func:`fiberae.channel.ssfm_propagate`."""
    n = q.shape[0]
    half_cd = cd_transfer(n, cfg.f_sim, cfg.beta2, cfg.dz / 2) if cfg.enable_cd else None
    for k in range(cfg.n_ssfm_steps):
        if half_cd is not None:
            q = ad.ifft(ad.mask_multiply(ad.fft(q), half_cd))
        if cfg.enable_knl:
            q = knl_var(q, cfg.gamma, cfg.dz)
        if half_cd is not None:
            q = ad.ifft(ad.mask_multiply(ad.fft(q), half_cd))
        if cfg.enable_awgn:
            q = ad.add(q, ad.from_complex(step_noise(cfg, n, seed, k)))
    return q


def window_indices(n: int, n_adj: int) -> np.ndarray:
    """Row ``i`` holds ``i - n_adj .. i + n_adj`` modulo ``n``."""
    return (np.arange(n)[:, None] + np.arange(-n_adj, n_adj + 1)[None, :]) % n


def ae_rx_logits(y: ad.Var, rx: list, n_adj: int, launch_power: float, cfg: ChannelConfig) -> ad.Var:
    """ADC output (N_B * osf, 2) to per-symbol logits (N_B, M).

    ``rx`` is a list of ``(w, b)`` Vars. The symbol-rate samples are scaled by
    ``1/sqrt(launch_power)`` before windowing.
    """
    ys = ad.scale(ad.downsample(y, cfg.osf), 1.0 / np.sqrt(launch_power))
    n = ys.shape[0]
    h = ad.gather(ys, window_indices(n, n_adj))
    h = ad.reshape(h, (n, 2 * (2 * n_adj + 1)))
    for i, (w, b) in enumerate(rx):
        h = ad.bias_add(ad.matmul(h, w), b)
        if i < len(rx) - 1:
            h = ad.elu(h)
    return h


def ae_rx(y: ComplexSignal, rx: AeRxParams, n_adj: int, launch_power: float, cfg: ChannelConfig) -> np.ndarray:
    """Per-symbol probability vectors, shape (N_B, M)."""
    tape = ad.Tape()
    layers = [(tape.constant(w), tape.constant(b)) for w, b in rx.weights]
    logits = ae_rx_logits(tape.constant(ad.from_complex(y.samples)), layers, n_adj, launch_power, cfg)
    return ad.softmax(logits).value


def forward_loss(tape: ad.Tape, p: dict, s, cfg: ChannelConfig, launch_power: float, n_adj: int, n_layers: int, seed):
    """Builds the full training graph; returns ``(loss, vars)``."""
    v = {k: tape.leaf(val) for k, val in p.items()}
    x = ae_tx_var(s, v["W"], v["F"], launch_power, cfg)
    x = lowpass_var(x, cfg)                     # DAC
    y = lowpass_var(ssfm_var(x, cfg, seed), cfg)  # fiber + ADC
    layers = [(v[f"dense{i}.w"], v[f"dense{i}.b"]) for i in range(n_layers)]
    logits = ae_rx_logits(y, layers, n_adj, launch_power, cfg)
    return ad.softmax_cross_entropy(logits, s), v


# -- training -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    channel: ChannelConfig = field(default_factory=desk_channel)
    launch_power: float = 1e-4
    m: int = 16
    n_b: int = 256
    n_adj: int = 0
    iterations: int = 20_000
    lr_tx: float = 1e-3
    lr_rx: float = 1e-3
    decay_every: float = 0.25
    decay_factor: float = 0.5
    clip_norm: float = 1.0
    n_taps: int | None = None
    hidden: tuple = DEFAULT_HIDDEN
    seed: int = 0
    eval_blocks: int = 20
    preset: str = "desk"

    def __post_init__(self):
        if self.n_adj < 0:
            raise ValueError("n_adj must be non-negative")
        if 2 * self.n_adj + 1 > self.n_b:
            raise ValueError("receiver window 2*n_adj+1 exceeds the block length")
        if not self.launch_power > 0:
            raise ValueError("launch power must be positive")

    @property
    def shaper_taps(self) -> int:
        return self.n_taps or 64 * self.channel.osf + 1

    def lr_at(self, step: int) -> tuple[float, float]:
        every = max(1, int(round(self.decay_every * self.iterations)))
        k = self.decay_factor ** (step // every)
        return self.lr_tx * k, self.lr_rx * k

    def as_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def config_hash(self) -> str:
        """Hash of everything that shapes the model; ``iterations`` and ``eval_blocks`` excluded."""
        d = self.as_dict()
        d.pop("iterations")
        d.pop("eval_blocks")
        blob = json.dumps(d, sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class TrainResult:
    tx: AeTxParams
    rx: AeRxParams
    losses: list
    mi_bits: float = float("nan")
    se: float = float("nan")
    ser: float = float("nan")
    diverged: bool = False
    state: ad.AdamState | None = None


def init_params(cfg: TrainConfig) -> tuple[AeTxParams, AeRxParams]:
    tx = AeTxParams.init(cfg.m, cfg.channel.osf, cfg.shaper_taps, substream(cfg.seed, 11))
    rx = AeRxParams.init(cfg.n_adj, cfg.m, cfg.hidden, substream(cfg.seed, 12))
    return tx, rx


def train_step(p: dict, state: ad.AdamState, cfg: TrainConfig, step: int) -> tuple[float, dict]:
    """One Adam step on a fresh random block; returns ``(loss, new_params)``."""
    s = substream(cfg.seed, 0, step).integers(0, cfg.m, cfg.n_b)
    tape = ad.Tape()
    n_layers = len(cfg.hidden) + 1
    loss, v = forward_loss(tape, p, s, cfg.channel, cfg.launch_power, cfg.n_adj, n_layers, [cfg.seed, 3, step])
    value = float(loss.value)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at step {step}")
    tape.backward(loss)
    grads = {k: var.grad for k, var in v.items()}
    grads, _ = ad.clip_global_norm(grads, cfg.clip_norm)
    lr_tx, lr_rx = cfg.lr_at(step)
    lrs = {k: (lr_tx if k in ("W", "F") else lr_rx) for k in p}
    return value, ad.adam_update(p, grads, state, lrs)


def evaluate(tx: AeTxParams, rx: AeRxParams, cfg: TrainConfig, n_blocks: int | None = None):
    """Held-out MI/SE/SER with seeds disjoint from training. Returns ``(MiEstimate, ser)``."""
    n_blocks = n_blocks or cfg.eval_blocks
    ch = cfg.channel
    sent, decided = [], []
    for b in range(n_blocks):
        s = substream(cfg.seed, 1, b).integers(0, cfg.m, cfg.n_b)
        x = ae_tx(s, tx, cfg.launch_power, ch)
        y = adc(ssfm_propagate(dac(x, ch), ch, [cfg.seed, 2, b]), ch)
        probs = ae_rx(y, rx, cfg.n_adj, cfg.launch_power, ch)
        sent.append(s)
        decided.append(np.argmax(probs, axis=1))
    s = np.concatenate(sent)
    s_hat = np.concatenate(decided)
    return estimate_mi(s, s_hat), symbol_error_rate(s, s_hat)


def train(cfg: TrainConfig, resume: TrainResult | None = None, callback=None) -> TrainResult:
    """Run ``cfg.iterations`` steps, then evaluate on held-out blocks.

    A non-finite loss stops training; the partial history is returned with
    ``diverged=True``.
    """
    if resume is None:
        tx, rx = init_params(cfg)
        p = _flatten(tx, rx)
        state = ad.AdamState(p)
        losses: list = []
    else:
        p = _flatten(resume.tx, resume.rx)
        state = resume.state or ad.AdamState(p)
        losses = list(resume.losses)
    n_layers = len(cfg.hidden) + 1
    diverged = False
    for step in range(len(losses), cfg.iterations):
        try:
            loss, p = train_step(p, state, cfg, step)
        except DivergenceError as exc:
            log.warning("%s", exc)
            diverged = True
            break
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    tx, rx = _unflatten(p, n_layers)
    result = TrainResult(tx, rx, losses, diverged=diverged, state=state)
    if not diverged:
        est, ser = evaluate(tx, rx, cfg)
        result.mi_bits = est.mi_bits
        result.se = spectral_efficiency(est.mi_bits, 1 / cfg.channel.bw, cfg.channel.bw)
        result.ser = ser
    return result


# -- analysis -------------------------------------------------------------------

def _shaped_impulse(tx: AeTxParams, cfg: ChannelConfig, n_sym: int) -> np.ndarray:
    """Upsample one unit symbol at ``n_sym // 2``, filter with F, low-pass; not normalised."""
    osf = cfg.osf
    up = np.zeros(n_sym * osf, dtype=np.complex128)
    up[(n_sym // 2) * osf] = 1.0
    x = circular_convolve(up, tx.f, tx.center)
    return ideal_lowpass(ComplexSignal(x, cfg.f_sim), cfg.bw).samples


def pulse_response(tx: AeTxParams, cfg: ChannelConfig, launch_power: float, n_sym: int = 256):
    """Single-pulse TX waveform and its received version (noise off).

    The pulse is scaled so one symbol slot carries mean power ``launch_power``.
    Returns ``(t, x, y)`` with ``t`` centred on the pulse.
    """
    x = _shaped_impulse(tx, cfg, n_sym)
    x = x * np.sqrt(launch_power * cfg.osf / np.sum(np.abs(x) ** 2))
    quiet = cfg.replace(enable_awgn=False)
    y = adc(ssfm_propagate(dac(ComplexSignal(x, cfg.f_sim), quiet), quiet), quiet).samples
    t = (np.arange(x.size) - (n_sym // 2) * cfg.osf) / cfg.f_sim
    return t, x, y


def combined_symbol_response(tx: AeTxParams, cfg: ChannelConfig, n_sym: int = 256) -> np.ndarray:
    """Symbol-spaced end-to-end impulse response through a Kerr-free, noise-free channel."""
    x = ComplexSignal(_shaped_impulse(tx, cfg, n_sym), cfg.f_sim)
    lin = cfg.replace(enable_awgn=False, enable_knl=False)
    y = adc(linear_propagate(dac(x, lin), lin) if lin.enable_cd else dac(x, lin), lin)
    return y.samples[::cfg.osf]


def _write_csv(path: Path, header: str, rows: np.ndarray):
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")


def export_learned_artifacts(tx: AeTxParams, cfg: ChannelConfig, launch_power: float, out_dir, n_sym: int = 256) -> dict:
    """Write ``emb.csv`` and ``pulse.csv``; returns ``{name: path}``.

    ``emb.csv``: ``index,re,im`` (unit mean power).
    ``pulse.csv``: ``t_s`` plus peak-normalised power and phase (rad) of the
    transmitted and received single pulse, and the Nyquist reference
    ``sinc(R_s t)^2``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pts = tx.constellation.points
    emb = np.column_stack([np.arange(pts.size), pts.real, pts.imag])
    _write_csv(out / "emb.csv", "index,re,im", emb)
    t, x, y = pulse_response(tx, cfg, launch_power, n_sym)
    rows = np.column_stack([
        t,
        np.abs(x) ** 2 / np.max(np.abs(x) ** 2),
        np.angle(x),
        np.abs(y) ** 2 / np.max(np.abs(y) ** 2),
        np.angle(y),
        np.sinc(cfg.bw * t) ** 2,
    ])
    _write_csv(out / "pulse.csv", "t_s,tx_power_norm,tx_phase_rad,rx_power_norm,rx_phase_rad,nyquist_ref", rows)
    return {"emb": out / "emb.csv", "pulse": out / "pulse.csv"}


def load_embedding(path) -> Constellation:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    order = np.argsort(data[:, 0])
    return Constellation(data[order, 1] + 1j * data[order, 2])


def load_pulse(path) -> dict:
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {n: data[:, i] for i, n in enumerate(names)}


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, result: TrainResult, cfg: TrainConfig):
    """Atomic ``.npz`` checkpoint: parameters, Adam moments, loss history, config + hash."""
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in _flatten(result.tx, result.rx).items()}
    if result.state is not None:
        arrays.update({f"adam_m/{k}": v for k, v in result.state.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in result.state.v.items()})
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg.config_hash(),
        "config": cfg.as_dict(),
        "adam_step": result.state.step if result.state else 0,
        "diverged": result.diverged,
        "mi_bits": result.mi_bits,
        "se": result.se,
        "ser": result.ser,
    }
    arrays["losses"] = np.asarray(result.losses, dtype=np.float64)
    arrays["meta"] = np.frombuffer(json.dumps(meta, default=float).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[TrainResult, dict]:
    """Load a checkpoint; with ``cfg`` given, refuse one written for another configuration."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        if cfg is not None and meta["config_hash"] != cfg.config_hash():
            raise ConfigMismatchError(
                f"checkpoint config hash {meta['config_hash']} != {cfg.config_hash()}"
            )
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        state = ad.AdamState(params)
        state.step = int(meta["adam_step"])
        for k in params:
            if f"adam_m/{k}" in z.files:
                state.m[k] = z[f"adam_m/{k}"]
                state.v[k] = z[f"adam_v/{k}"]
        losses = z["losses"].tolist()
    n_layers = sum(1 for k in params if k.endswith(".w"))
    tx, rx = _unflatten(params, n_layers)
    result = TrainResult(tx, rx, losses, meta["mi_bits"], meta["se"], meta["ser"], meta["diverged"], state)
    return result, meta

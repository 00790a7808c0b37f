"""Acceptance checks shared by ``fiberae selftest`` and the test suite.

Each ``criterion_N(out, seed)`` returns ``(passed, detail)``; ``passed is None``
marks a criterion that is recorded but not gated.
"""
from __future__ import annotations

import filecmp
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autoencoder import (
    TrainConfig,
    ae_tx_var,
    combined_symbol_response,
    desk_channel,
    export_learned_artifacts,
    save_checkpoint,
    ssfm_var,
    train,
)
from .channel import ChannelConfig, NoiseModel, linear_propagate, ssfm_propagate, step_noise, substream
from .conventional import Constellation, conventional_link, conventional_tx
from .experiment import ExperimentConfig, emit_psd_report, read_se_csv, run_sweep
from .metrics import estimate_mi, plugin_mi_bias, snr_db
from .signal import ComplexSignal, SymbolBlock, frequency_grid

__all__ = ["CriterionResult", "CRITERIA", "run_criterion", "run_selftest", "gradcheck_report", "shaper_phase_fit"]


@dataclass
class CriterionResult:
    number: int
    title: str
    status: str          # PASS | FAIL | EXCLUDED
    detail: str
    seconds: float
    artifacts: list = field(default_factory=list)

    def line(self) -> str:
        return f"[{self.status:<8}] criterion {self.number:>2}: {self.title} | {self.detail} ({self.seconds:.1f} s)"


def _shaped_block(cfg: ChannelConfig, power: float, n_sym: int, seed: int, m: int = 16) -> ComplexSignal:
    block = SymbolBlock.random(n_sym, m, np.random.default_rng(seed))
    return conventional_tx(block, Constellation.square_qam(m), power, cfg)


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# -- 1-4: channel ---------------------------------------------------------------

def criterion_1(out: Path, seed: int):
    desk = ChannelConfig(f_sim=160e9, n_ssfm_steps=50, enable_awgn=False, enable_knl=False)
    x = _shaped_block(desk, 1e-3, 256, seed)
    t0 = time.perf_counter()
    y = ssfm_propagate(x, desk).samples
    runtime = time.perf_counter() - t0
    err_desk = _rel(y, linear_propagate(x, desk).samples)
    full = ChannelConfig(enable_awgn=False, enable_knl=False)
    xf = _shaped_block(full, 1e-3, 256, seed)
    err_full = _rel(ssfm_propagate(xf, full).samples, linear_propagate(xf, full).samples)
    ok = err_desk < 1e-9 and err_full < 1e-9 and runtime < 5.0
    return ok, f"rel. L2 error {err_full:.2e} (1 THz, 200 steps), {err_desk:.2e} (desk, {runtime:.2f} s)"


def criterion_2(out: Path, seed: int):
    cfg = ChannelConfig(enable_awgn=False, enable_cd=False)
    x = _shaped_block(cfg, 1e-2, 256, seed).samples
    ref = x * np.exp(-1j * cfg.gamma * np.abs(x) ** 2 * cfg.length_km)
    err = _rel(ssfm_propagate(ComplexSignal(x, cfg.f_sim), cfg).samples, ref)
    return err < 1e-10, f"rel. error {err:.2e} at 10 dBm"


def criterion_3(out: Path, seed: int):
    cfg = ChannelConfig(f_sim=160e9, length_km=200.0, enable_awgn=False)
    n = 1024
    t = (np.arange(n) - n // 2) / cfg.f_sim
    x = ComplexSignal(np.sqrt(5e-3) * np.exp(-0.5 * (t / 40e-12) ** 2), cfg.f_sim)
    steps = (8, 16, 32, 64)
    ref = ssfm_propagate(x, cfg.replace(n_ssfm_steps=8 * steps[-1])).samples
    errs = [np.linalg.norm(ssfm_propagate(x, cfg.replace(n_ssfm_steps=k)).samples - ref) for k in steps]
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    ok = all(3.0 <= r <= 5.0 for r in ratios)
    return ok, "error ratios per step doubling " + ", ".join(f"{r:.2f}" for r in ratios)


def criterion_4(out: Path, seed: int):
    cfg = ChannelConfig()
    nm = NoiseModel.from_config(cfg)
    w = step_noise(cfg, 10**6, seed, 0)
    emp = float(np.mean(np.abs(w) ** 2))
    dev = abs(emp / nm.sigma2_per_step - 1)
    rho_ok = abs(nm.rho_n / 5.90e-21 - 1) < 5e-3
    return dev < 0.01 and rho_ok, f"rho_n {nm.rho_n:.4e} W/(Hz km), per-step variance off by {100 * dev:.3f} %"


# -- 5-6: conventional system -------------------------------------------------------

def _desk_sweep(out: Path, seed: int, channel: str, blocks: int, powers=None) -> dict:
    kw = dict(preset="desk", channel=channel, system="conv", seed=seed, blocks=blocks, out=str(out))
    if powers is not None:
        kw["powers_dbm"] = tuple(powers)
    cfg = ExperimentConfig(**kw)
    run_dir = out / f"sweep_{channel}"
    run_dir.mkdir(parents=True, exist_ok=True)
    run_sweep(cfg, run_dir)
    return read_se_csv(run_dir / "se.csv")


def criterion_5(out: Path, seed: int, blocks: int = 200):
    a = _desk_sweep(out, seed, "a", blocks)
    d = _desk_sweep(out, seed, "ad", blocks)
    gap = float(np.max(np.abs(a["se"] - d["se"])))
    cfg = desk_channel("ad", enable_awgn=False)
    block = SymbolBlock.random(2048, 16, np.random.default_rng(seed))
    correct = int(np.sum(conventional_link(block, cfg, 1e-3).indices == block.indices))
    ok = gap < 0.05 and correct == 2048
    return ok, f"max |SE_AD - SE_A| {gap:.4f} bit over {a['se'].size} powers, noiseless C_AD {correct}/2048"


def _unimodal(se: np.ndarray, tol: float) -> tuple[bool, int]:
    k = int(np.argmax(se))
    rising = np.all(np.diff(se[:k + 1]) > -tol)
    falling = np.all(np.diff(se[k:]) < tol)
    return bool(rising and falling and 0 < k < se.size - 1), k


def criterion_6(out: Path, seed: int, blocks: int = 20):
    s = _desk_sweep(out, seed, "adn", blocks)
    se, p = s["se"], s["p_dbm"]
    tol = 3 * float(np.nanmax(s["mi_stderr_bits"]))
    uni, k = _unimodal(se, tol)
    drop = se[k] - se[-1]
    psd_cfg = ExperimentConfig(preset="full", channel="adn", m=16, seed=seed, powers_dbm=(-10.0, 0.0, 10.0),
                               n_b=1024, psd_blocks=2, out=str(out))
    psd_dir = out / "psd_adn"
    psd_dir.mkdir(parents=True, exist_ok=True)
    widths = emit_psd_report(psd_cfg, psd_dir)
    bw_yo = [widths[q]["y_o"] for q in psd_cfg.powers_dbm]
    increasing = all(b2 > b1 for b1, b2 in zip(bw_yo, bw_yo[1:]))
    ok = uni and drop > 0.1 and increasing
    return ok, (
        f"SE peak {se[k]:.3f} bit at {p[k]:g} dBm, {drop:.3f} bit lower at {p[-1]:g} dBm; "
        "y_o -20 dB width " + " < ".join(f"{b / 1e9:.1f}" for b in bw_yo) + " GHz at -10/0/10 dBm"
    )


# -- 7-8: estimator and gradients ------------------------------------------------------

def criterion_7(out: Path, seed: int):
    m = 256
    s = np.repeat(np.arange(m), 256)
    np.random.default_rng(seed).shuffle(s)
    ident = estimate_mi(s, s).mi_bits
    m2, n = 16, 100_000
    rng = np.random.default_rng(seed + 1)
    indep = estimate_mi(rng.integers(0, m2, n), rng.integers(0, m2, n)).mi_bits
    bound = plugin_mi_bias(m2, n)
    sigma = np.sqrt(2) * (m2 - 1) / (2 * n * np.log(2))
    ok = ident == np.log2(m) and indep < bound + 3 * sigma
    return ok, f"identity {ident:.12g} bit; independent {indep:.2e} < {bound + 3 * sigma:.2e} bit"


def _primitive_cases():
    def rn(r, *shape):
        return r.standard_normal(shape)

    return {
        "add": (lambda r: rn(r, 6, 2), lambda t, x, r: ad.add(x, t.constant(rn(r, 6, 2)))),
        "sub": (lambda r: rn(r, 6, 2), lambda t, x, r: ad.sub(t.constant(rn(r, 6, 2)), x)),
        "mul": (lambda r: rn(r, 6, 2), lambda t, x, r: ad.mul(x, x)),
        "scale": (lambda r: rn(r, 6, 2), lambda t, x, r: ad.scale(x, 1.7)),
        "cmul": (lambda r: rn(r, 6, 2), lambda t, x, r: ad.cmul(x, x)),
        "mask_multiply": (lambda r: rn(r, 8, 2), lambda t, x, r: ad.mask_multiply(x, np.exp(1j * rn(r, 8)))),
        "exp_j": (lambda r: rn(r, 6), lambda t, x, r: ad.exp_j(x)),
        "abs2": (lambda r: rn(r, 6, 2), lambda t, x, r: ad.abs2(x)),
        "rsqrt": (lambda r: 0.5 + r.random(6), lambda t, x, r: ad.rsqrt(x)),
        "sum": (lambda r: rn(r, 5), lambda t, x, r: ad.mul(ad.sum(x), ad.sum(x))),
        "mean": (lambda r: rn(r, 5), lambda t, x, r: ad.mul(ad.mean(x), ad.mean(x))),
        "matmul": (lambda r: rn(r, 3, 4), lambda t, x, r: ad.matmul(x, t.constant(rn(r, 4, 2)))),
        "bias_add": (lambda r: rn(r, 4), lambda t, x, r: ad.bias_add(t.constant(rn(r, 3, 4)), x)),
        "elu": (lambda r: rn(r, 8), lambda t, x, r: ad.elu(x)),
        "softmax": (lambda r: rn(r, 2, 5), lambda t, x, r: ad.softmax(x)),
        "softmax_cross_entropy": (lambda r: rn(r, 4, 5), lambda t, x, r: ad.softmax_cross_entropy(x, [0, 3, 1, 4])),
        "gather": (lambda r: rn(r, 4, 2), lambda t, x, r: ad.gather(x, [3, 0, 3, 1, 2])),
        "reshape": (lambda r: rn(r, 4, 3), lambda t, x, r: ad.reshape(x, (3, 4))),
        "circular_fir": (lambda r: rn(r, 12, 2), lambda t, x, r: ad.circular_fir(x, t.constant(rn(r, 5, 2)), 2)),
        "circular_fir_taps": (lambda r: rn(r, 5, 2), lambda t, x, r: ad.circular_fir(t.constant(rn(r, 12, 2)), x, 2)),
        "upsample": (lambda r: rn(r, 4, 2), lambda t, x, r: ad.upsample(x, 3)),
        "downsample": (lambda r: rn(r, 12, 2), lambda t, x, r: ad.downsample(x, 3, 1)),
        "fft": (lambda r: rn(r, 8, 2), lambda t, x, r: ad.fft(x)),
        "ifft": (lambda r: rn(r, 8, 2), lambda t, x, r: ad.ifft(x)),
        "power_normalize": (lambda r: rn(r, 8, 2), lambda t, x, r: ad.power_normalize(x, 2.0)),
    }


def _readout(t: ad.Tape, y: ad.Var, seed: int) -> ad.Var:
    if y.value.size == 1:
        return y
    r = np.random.default_rng([seed, 99]).standard_normal(y.shape)
    return ad.sum(ad.mul(y, t.constant(r)))


def gradcheck_report(seed: int = 0) -> list[tuple[str, float]]:
    """Max relative error of reverse-mode vs finite differences, per primitive and composed graph."""
    rows = []
    for name, (make, graph) in _primitive_cases().items():
        x0 = make(np.random.default_rng([seed, 1]))
        err, _, _ = ad.grad_check(
            lambda t, x: _readout(t, graph(t, x, np.random.default_rng([seed, 2])), seed), x0
        )
        rows.append((name, err))

    cfg = ChannelConfig(f_sim=64e9, bw=16e9, n_ssfm_steps=4, length_km=400.0)
    rng = np.random.default_rng([seed, 3])
    s = rng.integers(0, 4, 16)
    w0 = rng.uniform(-1, 1, (4, 2))
    f0 = rng.standard_normal((9, 2))

    def tx_ssfm_w(t, w):
        x = ae_tx_var(s, w, t.constant(f0), 1e-3, cfg)
        return _readout(t, ssfm_var(x, cfg, seed), seed)

    def tx_ssfm_f(t, f):
        x = ae_tx_var(s, t.constant(w0), f, 1e-3, cfg)
        return _readout(t, ssfm_var(x, cfg, seed), seed)

    rows.append(("ae_tx+ssfm4 (embedding)", ad.grad_check(tx_ssfm_w, w0)[0]))
    rows.append(("ae_tx+ssfm4 (shaper)", ad.grad_check(tx_ssfm_f, f0)[0]))
    return rows


def criterion_8(out: Path, seed: int):
    t0 = time.perf_counter()
    rows = gradcheck_report(seed)
    runtime = time.perf_counter() - t0
    name, worst = max(rows, key=lambda r: r[1])
    ok = worst < 1e-4 and runtime < 120
    return ok, f"{len(rows)} graphs, worst {worst:.2e} ({name}), {runtime:.1f} s"


# -- 9-10: autoencoder -------------------------------------------------------------

def ae_train_config(channel: str, seed: int, **kw) -> TrainConfig:
    ch = desk_channel(channel)
    # 30 dB SNR at the desk link
    p30 = 1000 * ch.noise.rho_n * ch.length_km * ch.bw
    base = dict(channel=ch, launch_power=p30, m=16, n_adj=0, iterations=2000, seed=seed, eval_blocks=20)
    base.update(kw)
    return TrainConfig(**base)


def _train_and_export(out: Path, tcfg: TrainConfig, name: str):
    res = train(tcfg)
    run_dir = out / name
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run_dir / "checkpoint.npz", res, tcfg)
    np.savetxt(run_dir / "losses.csv", np.column_stack([np.arange(len(res.losses)), res.losses]),
               delimiter=",", header="step,loss_nats", comments="", fmt=["%d", "%.17g"])
    if not res.diverged:
        export_learned_artifacts(res.tx, tcfg.channel, tcfg.launch_power, run_dir)
    return res


def criterion_9(out: Path, seed: int, iterations: int = 2000):
    tcfg = ae_train_config("a", seed, iterations=iterations)
    t0 = time.perf_counter()
    res = _train_and_export(out, tcfg, "ae_a")
    runtime = time.perf_counter() - t0
    ch = tcfg.channel
    sent, decided = [], []
    for b in range(tcfg.eval_blocks):
        # same labels and noise draws as the held-out AE evaluation
        block = SymbolBlock(substream(seed, 1, b).integers(0, 16, tcfg.n_b), 16)
        sent.append(block.indices)
        decided.append(conventional_link(block, ch, tcfg.launch_power, seed=[seed, 2, b]).indices)
    conv = estimate_mi(np.concatenate(sent), np.concatenate(decided)).mi_bits
    gap = abs(res.se - conv)
    ok = (not res.diverged) and gap < 0.2 and runtime < 1800
    return ok, (
        f"AE SE {res.se:.3f} vs 16-QAM {conv:.3f} bit/(s Hz) at {snr_db(tcfg.launch_power, ch):.1f} dB SNR, "
        f"{iterations} steps in {runtime / 60:.1f} min"
    )


def shaper_phase_fit(f: np.ndarray, center: int | None = None, fraction: float = 0.5) -> tuple[float, float]:
    """Quadratic fit to the unwrapped tap phase over the central ``fraction`` of taps.

    Returns ``(curvature, r_squared)``; curvature is the coefficient of ``k^2``.
    """
    n = f.size
    center = n // 2 if center is None else center
    half = int(round(fraction * n / 2))
    k = np.arange(center - half, center + half + 1)
    phase = np.unwrap(np.angle(f[k]))
    kk = (k - center).astype(float)
    coef = np.polyfit(kk, phase, 2)
    fit = np.polyval(coef, kk)
    ss_res = np.sum((phase - fit) ** 2)
    ss_tot = np.sum((phase - phase.mean()) ** 2)
    return float(coef[0]), float(1 - ss_res / ss_tot)


def inband_phase_curvature(f: np.ndarray, cfg: ChannelConfig, center: int) -> tuple[float, float]:
    """Quadratic fit of the shaper's frequency-response phase over ``|f| <= bw/2``."""
    n = 4 * f.size
    kernel = np.zeros(n, dtype=complex)
    kernel[(np.arange(f.size) - center) % n] = f
    resp = np.fft.fft(kernel)
    freqs = frequency_grid(n, cfg.f_sim)
    sel = np.abs(freqs) <= cfg.bw / 2
    order = np.argsort(freqs[sel])
    x = freqs[sel][order] / cfg.bw
    phase = np.unwrap(np.angle(resp[sel][order]))
    coef = np.polyfit(x, phase, 2)
    fit = np.polyval(coef, x)
    r2 = 1 - np.sum((phase - fit) ** 2) / np.sum((phase - phase.mean()) ** 2)
    return float(coef[0]), float(r2)


def criterion_10(out: Path, seed: int, iterations: int = 2000):
    tcfg = ae_train_config("ad", seed, iterations=iterations)
    res = _train_and_export(out, tcfg, "ae_ad")
    ch = tcfg.channel
    h = combined_symbol_response(res.tx, ch)
    e = np.abs(h) ** 2
    isi = float(1 - e.max() / e.sum())
    curv, r2 = shaper_phase_fit(res.tx.f, res.tx.center)
    # reference sign: the exact pre-compensator for this link, sampled at the shaper rate
    ref = _precompensator_taps(ch, res.tx.f.size)
    ref_curv, _ = shaper_phase_fit(ref)
    fcurv, fr2 = inband_phase_curvature(res.tx.f, ch, res.tx.center)
    ok = (not res.diverged) and isi < 0.05 and np.sign(curv) == np.sign(ref_curv) and r2 > 0.8 and fcurv < 0
    return ok, (
        f"ISI off-tap energy {100 * isi:.2f} %; tap phase curvature {curv:+.3e} rad/tap^2 "
        f"(conjugate-CD reference {ref_curv:+.3e}), R^2 {r2:.3f}; in-band frequency-phase curvature "
        f"{fcurv:+.2f} rad (R^2 {fr2:.3f}); AE SE {res.se:.3f}"
    )


def _precompensator_taps(cfg: ChannelConfig, n_taps: int) -> np.ndarray:
    """Centre ``n_taps`` of the band-limited inverse-CD impulse response at ``f_sim``."""
    n = 8 * n_taps
    w = 2 * np.pi * frequency_grid(n, cfg.f_sim)
    resp = np.exp(0.5j * cfg.beta2 * w**2 * cfg.length_km) * (np.abs(w) <= 2 * np.pi * cfg.bw / 2)
    h = np.fft.fftshift(np.fft.ifft(resp))
    mid = n // 2
    return h[mid - n_taps // 2: mid + n_taps // 2 + 1]


def criterion_11(out: Path, seed: int):
    return None, "headline full-scale numbers are a stretch target behind the full preset; not gated"


# -- 12: determinism -----------------------------------------------------------------

def _artifact_pass(out: Path, seed: int):
    for ch in ("a", "adn"):
        cfg = ExperimentConfig(preset="desk", channel=ch, seed=seed, blocks=3, powers_dbm=(-20.0, -4.0), out=str(out))
        d = out / f"sweep_{ch}"
        d.mkdir(parents=True, exist_ok=True)
        run_sweep(cfg, d)
    psd = ExperimentConfig(preset="desk", channel="adn", seed=seed, powers_dbm=(-10.0, 0.0), psd_blocks=1,
                           psd_segment=512, out=str(out))
    d = out / "psd"
    d.mkdir(parents=True, exist_ok=True)
    emit_psd_report(psd, d)
    tcfg = TrainConfig(channel=desk_channel("adn", n_ssfm_steps=5), m=4, n_b=32, hidden=(16, 16),
                       iterations=5, n_taps=8 * 8 + 1, seed=seed, eval_blocks=2)
    _train_and_export(out, tcfg, "ae_smoke")


def _csv_files(root: Path) -> list[Path]:
    return sorted(p.relative_to(root) for p in root.rglob("*.csv"))


def compare_csv_trees(a: Path, b: Path) -> tuple[bool, int, list]:
    fa, fb = _csv_files(a), _csv_files(b)
    if fa != fb:
        return False, len(fa), sorted(set(map(str, fa)) ^ set(map(str, fb)))
    diff = [str(p) for p in fa if not filecmp.cmp(a / p, b / p, shallow=False)]
    return not diff, len(fa), diff


def criterion_12(out: Path, seed: int):
    _artifact_pass(out / "det_run1", seed)
    _artifact_pass(out / "det_run2", seed)
    same, n, diff = compare_csv_trees(out / "det_run1", out / "det_run2")
    return same and n > 0, f"{n} CSV files compared, {len(diff)} differ" + (f": {diff[:3]}" if diff else "")


CRITERIA = {
    1: ("SSFM linear oracle", criterion_1),
    2: ("SSFM nonlinear oracle", criterion_2),
    3: ("splitting order", criterion_3),
    4: ("noise calibration", criterion_4),
    5: ("conventional C_AD matches C_A", criterion_5),
    6: ("conventional C_ADN shape and PSD broadening", criterion_6),
    7: ("MI estimator", criterion_7),
    8: ("autodiff finite-difference checks", criterion_8),
    9: ("AE on C_A matches 16-QAM", criterion_9),
    10: ("AE on C_AD learns CD pre-compensation", criterion_10),
    11: ("full-scale headline numbers", criterion_11),
    12: ("determinism of artifact CSVs", criterion_12),
}


def run_criterion(number: int, out: Path, seed: int = 0, **kw) -> CriterionResult:
    title, fn = CRITERIA[number]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        passed, detail = fn(out, seed, **kw)
    except Exception as exc:  # noqa: BLE001 - reported as a failed criterion
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    status = "EXCLUDED" if passed is None else ("PASS" if passed else "FAIL")
    return CriterionResult(number, title, status, detail, time.perf_counter() - t0)


def run_selftest(out, seed: int = 0, quick: bool = False, only=None) -> list[CriterionResult]:
    """Run the criteria in order; ``quick`` skips the two training runs."""
    out = Path(out)
    numbers = sorted(only) if only else sorted(CRITERIA)
    results = []
    for n in numbers:
        if quick and n in (9, 10):
            continue
        results.append(run_criterion(n, out / f"c{n:02d}", seed))
    return results

"""Experiment front-end: flat key-value configs, power sweeps and CSV reports.

Config files hold one ``key = value`` pair per line. ``#`` starts a comment,
blank lines are ignored, lists are comma separated and booleans are
``true``/``false``. Unknown or repeated keys are errors.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autoencoder import (
    AeTxParams,
    TrainConfig,
    export_learned_artifacts,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .channel import ChannelConfig, adc, dac, ssfm_propagate, substream
from .conventional import Constellation, conventional_receive, conventional_tx
from .metrics import (
    awgn_capacity,
    estimate_mi,
    qam_symbolwise_capacity,
    snr,
    spectral_efficiency,
    symbol_error_rate,
)
from .signal import SymbolBlock, dbm_to_watt, welch_psd

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SweepPoint",
    "parse_config_text",
    "load_config",
    "resolve_config",
    "prepare_run_dir",
    "run_sweep",
    "run_training",
    "emit_psd_report",
    "emit_learned_report",
    "bandwidth_at_level",
    "jackknife_mi",
]

log = logging.getLogger(__name__)

CHANNEL_KEYS = ("h", "f0", "alpha", "beta2", "gamma", "n_sp", "length_km", "n_ssfm_steps", "f_sim", "bw")

PRESETS = {
    "desk": dict(
        f_sim=160e9, n_ssfm_steps=50, m=16, powers_dbm=tuple(float(p) for p in range(-30, 1, 2)),
        iterations=2000, max_power_dbm=0.0,
    ),
    "full": dict(
        f_sim=1e12, n_ssfm_steps=200, m=256, powers_dbm=tuple(float(p) for p in range(-30, 11, 2)),
        iterations=20000, max_power_dbm=None,
    ),
}


class ConfigError(ValueError):
    """Bad configuration: unknown key, malformed value or inconsistent preset."""


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "desk"
    channel: str = "adn"
    system: str = "conv"
    powers_dbm: tuple = PRESETS["desk"]["powers_dbm"]
    seed: int = 0
    out: str = "runs"
    m: int = 16
    n_b: int = 256
    blocks: int = 20
    n_adj: int = 0
    iterations: int = 2000
    lr_tx: float = 1e-3
    lr_rx: float = 1e-3
    hidden: tuple = (2048, 512, 512, 512, 512, 512)
    n_taps: int = 0
    span: int = 64
    cd_method: str = "exact"
    workers: int = 1
    psd_segment: int = 2048
    psd_blocks: int = 4
    enable_awgn: bool | None = None
    enable_cd: bool | None = None
    enable_knl: bool | None = None
    # channel overrides; ``None`` keeps the preset or default value
    h: float | None = None
    f0: float | None = None
    alpha: float | None = None
    beta2: float | None = None
    gamma: float | None = None
    n_sp: float | None = None
    length_km: float | None = None
    n_ssfm_steps: int | None = None
    f_sim: float | None = None
    bw: float | None = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r} (desk|full)")
        if self.channel not in ("a", "ad", "adn"):
            raise ConfigError(f"unknown channel {self.channel!r} (a|ad|adn)")
        if self.system not in ("conv", "ae"):
            raise ConfigError(f"unknown system {self.system!r} (conv|ae)")
        if len(self.powers_dbm) == 0:
            raise ConfigError("power grid is empty")
        limit = PRESETS[self.preset]["max_power_dbm"]
        if limit is not None and max(self.powers_dbm) > limit:
            raise ConfigError(
                f"preset {self.preset!r} allows P <= {limit:g} dBm, got {max(self.powers_dbm):g} dBm"
            )
        if self.blocks < 1 or self.n_b < 1 or self.iterations < 0 or self.workers < 1:
            raise ConfigError("blocks, n_b and workers must be positive, iterations non-negative")
        if self.cd_method not in ("exact", "chirp"):
            raise ConfigError(f"unknown cd_method {self.cd_method!r}")
        try:
            self.channel_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def channel_config(self) -> ChannelConfig:
        params = {k: PRESETS[self.preset][k] for k in ("f_sim", "n_ssfm_steps")}
        params.update({k: getattr(self, k) for k in CHANNEL_KEYS if getattr(self, k) is not None})
        for flag in ("enable_awgn", "enable_cd", "enable_knl"):
            if getattr(self, flag) is not None:
                params[flag] = getattr(self, flag)
        return ChannelConfig.for_channel(self.channel, **params)

    def train_config(self, p_dbm: float) -> TrainConfig:
        return TrainConfig(
            channel=self.channel_config(),
            launch_power=dbm_to_watt(p_dbm),
            m=self.m,
            n_b=self.n_b,
            n_adj=self.n_adj,
            iterations=self.iterations,
            lr_tx=self.lr_tx,
            lr_rx=self.lr_rx,
            n_taps=self.n_taps or None,
            hidden=tuple(self.hidden),
            seed=self.seed,
            eval_blocks=self.blocks,
            preset=self.preset,
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["powers_dbm"] = list(self.powers_dbm)
        d["hidden"] = list(self.hidden)
        return d

    def config_hash(self) -> str:
        """Hash of the resolved config minus ``seed``, ``out`` and ``workers``."""
        d = self.as_dict()
        for k in ("seed", "out", "workers"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def run_id(self) -> str:
        return f"{self.config_hash()}-s{self.seed}"

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def resolved_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            if v is None:
                continue
            lines.append(f"{k} = {_format_value(v)}")
        return "\n".join(lines) + "\n"


# -- config parsing ---------------------------------------------------------------

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_INT_KEYS = {"seed", "m", "n_b", "blocks", "n_adj", "iterations", "n_taps", "span", "workers",
             "psd_segment", "psd_blocks", "n_ssfm_steps"}
_FLOAT_KEYS = {"lr_tx", "lr_rx", *CHANNEL_KEYS} - _INT_KEYS
_BOOL_KEYS = {"enable_awgn", "enable_cd", "enable_knl"}
_STR_KEYS = {"preset", "channel", "system", "out", "cd_method"}
_LIST_KEYS = {"powers_dbm": float, "hidden": int}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _LIST_KEYS:
            conv = _LIST_KEYS[key]
            return tuple(conv(float(x)) for x in raw.split(",") if x.strip())
        if key in _BOOL_KEYS:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse the flat ``key = value`` grammar into a dict of typed values."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Preset defaults, then file values, then explicit overrides."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in merged:
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
    preset = merged.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (desk|full)")
    base = {k: v for k, v in PRESETS[preset].items() if k in ("m", "powers_dbm", "iterations")}
    base.update(merged)
    return ExperimentConfig(**base)


def prepare_run_dir(cfg: ExperimentConfig) -> Path:
    """``<out>/<run-id>/`` with ``config.resolved`` written; returns the directory."""
    run_dir = Path(cfg.out) / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(cfg.resolved_text())
    return run_dir


def attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("fiberae").addHandler(handler)
    logging.getLogger("fiberae").setLevel(logging.INFO)
    return handler


def detach_log(handler: logging.Handler):
    logging.getLogger("fiberae").removeHandler(handler)
    handler.close()


# -- sweeps -------------------------------------------------------------------------

@dataclass
class SweepPoint:
    p_dbm: float
    snr_db: float
    mi_bits: float
    mi_stderr: float
    se: float
    ser: float
    seed: int
    c_awgn: float
    c_qam: float
    diverged: bool = False
    artifacts: dict = field(default_factory=dict)


def jackknife_mi(sent: list, decided: list) -> tuple[float, float]:
    """Pooled MI over all blocks and its leave-one-block-out standard error."""
    s_all = np.concatenate(sent)
    d_all = np.concatenate(decided)
    mi = estimate_mi(s_all, d_all).mi_bits
    n = len(sent)
    if n < 2:
        return mi, float("nan")
    loo = []
    for i in range(n):
        s = np.concatenate(sent[:i] + sent[i + 1:])
        d = np.concatenate(decided[:i] + decided[i + 1:])
        loo.append(estimate_mi(s, d).mi_bits)
    loo = np.asarray(loo)
    return mi, float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def conventional_blocks(cfg: ExperimentConfig, p_dbm: float) -> tuple[list, list]:
    ch = cfg.channel_config()
    c = Constellation.square_qam(cfg.m)
    power = dbm_to_watt(p_dbm)
    sent, decided = [], []
    for b in range(cfg.blocks):
        block = SymbolBlock(substream(cfg.seed, 1, b).integers(0, cfg.m, cfg.n_b), cfg.m)
        x = conventional_tx(block, c, power, ch, cfg.span)
        y = adc(ssfm_propagate(dac(x, ch), ch, [cfg.seed, 2, b]), ch)
        s_hat, _ = conventional_receive(y, c, power, ch, cfg.cd_method)
        sent.append(block.indices)
        decided.append(s_hat.indices)
    return sent, decided


def _reference_columns(cfg: ExperimentConfig, p_dbm: float) -> tuple[float, float, float]:
    ch = cfg.channel_config()
    s = snr(dbm_to_watt(p_dbm), ch)
    c_qam, _ = qam_symbolwise_capacity(s, cfg.m, seed=cfg.seed)
    return 10 * np.log10(s), float(awgn_capacity(s)), c_qam


def _sweep_point(cfg: ExperimentConfig, p_dbm: float, run_dir: str | None) -> SweepPoint:
    ch = cfg.channel_config()
    snr_db, c_awgn, c_qam = _reference_columns(cfg, p_dbm)
    artifacts: dict = {}
    if cfg.system == "conv":
        sent, decided = conventional_blocks(cfg, p_dbm)
        mi, err = jackknife_mi(sent, decided)
        ser = symbol_error_rate(np.concatenate(sent), np.concatenate(decided))
        diverged = False
    else:
        tcfg = cfg.train_config(p_dbm)
        res = train(tcfg)
        diverged = res.diverged
        mi, ser, err = res.mi_bits, res.ser, float("nan")
        if run_dir is not None:
            tag = _power_tag(p_dbm)
            save_checkpoint(Path(run_dir) / f"ckpt_{tag}.npz", res, tcfg)
            if not diverged:
                paths = export_learned_artifacts(res.tx, ch, tcfg.launch_power, Path(run_dir) / f"learned_{tag}")
                artifacts = {k: str(v) for k, v in paths.items()}
        log.info("P=%g dBm: AE trained, diverged=%s, MI=%.4f", p_dbm, diverged, mi)
    se = spectral_efficiency(mi, 1 / ch.bw, ch.bw) if np.isfinite(mi) else float("nan")
    return SweepPoint(p_dbm, snr_db, mi, err, se, ser, cfg.seed, c_awgn, c_qam, diverged, artifacts)


def _power_tag(p_dbm: float) -> str:
    return f"p{p_dbm:+06.1f}dbm".replace("+", "p").replace("-", "m").replace(".", "_")


SE_HEADER = "p_dbm,snr_db,mi_bits,mi_stderr_bits,se,ser,seed,c_awgn,c_qam,diverged"


def write_se_csv(path: Path, points: list[SweepPoint]):
    with open(path, "w") as fh:
        fh.write(SE_HEADER + "\n")
        for pt in points:
            fh.write(
                f"{pt.p_dbm:.17g},{pt.snr_db:.17g},{pt.mi_bits:.17g},{pt.mi_stderr:.17g},{pt.se:.17g},"
                f"{pt.ser:.17g},{pt.seed},{pt.c_awgn:.17g},{pt.c_qam:.17g},{int(pt.diverged)}\n"
            )


def read_se_csv(path) -> dict:
    data = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
    return {name: np.atleast_1d(data[name]) for name in data.dtype.names}


def run_sweep(cfg: ExperimentConfig, run_dir: Path | None = None) -> list[SweepPoint]:
    """One row per power, ordered as the grid; writes ``se.csv`` when ``run_dir`` is given.

    A diverged AE point is flagged and the sweep moves on.
    """
    rd = str(run_dir) if run_dir is not None else None
    powers = list(cfg.powers_dbm)
    if cfg.workers > 1 and len(powers) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_sweep_point, cfg, p, rd) for p in powers]
            points = [f.result() for f in futures]
    else:
        points = [_sweep_point(cfg, p, rd) for p in powers]
    for pt in points:
        log.info("P=%g dBm SNR=%.2f dB MI=%.4f SER=%.4g", pt.p_dbm, pt.snr_db, pt.mi_bits, pt.ser)
    if run_dir is not None:
        write_se_csv(Path(run_dir) / "se.csv", points)
    return points


def run_training(cfg: ExperimentConfig, run_dir: Path, resume: str | None = None):
    """Train one AE at the first grid power; writes checkpoint, history, learned artifacts and se.csv."""
    p_dbm = cfg.powers_dbm[0]
    tcfg = cfg.train_config(p_dbm)
    start = None
    if resume:
        start, _ = load_checkpoint(resume, tcfg)

    def progress(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.5f", step, loss)

    res = train(tcfg, resume=start, callback=progress)
    save_checkpoint(run_dir / "checkpoint.npz", res, tcfg)
    np.savetxt(run_dir / "losses.csv", np.column_stack([np.arange(len(res.losses)), res.losses]),
               delimiter=",", header="step,loss_nats", comments="", fmt=["%d", "%.17g"])
    if not res.diverged:
        export_learned_artifacts(res.tx, tcfg.channel, tcfg.launch_power, run_dir)
    snr_db, c_awgn, c_qam = _reference_columns(cfg, p_dbm)
    pt = SweepPoint(p_dbm, snr_db, res.mi_bits, float("nan"), res.se, res.ser, cfg.seed, c_awgn, c_qam, res.diverged)
    write_se_csv(run_dir / "se.csv", [pt])
    return res


# -- reports ------------------------------------------------------------------------

def bandwidth_at_level(f: np.ndarray, psd_db: np.ndarray, level_db: float = -20.0) -> float:
    """Width between the outermost frequencies whose PSD is at or above ``level_db``."""
    above = np.nonzero(psd_db >= level_db)[0]
    if above.size == 0:
        return 0.0
    return float(f[above[-1]] - f[above[0]])


def emit_psd_report(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """Welch PSDs of the TX output ``x``, raw fiber output ``y_o`` and ADC output ``y``.

    One ``psd_<power>.csv`` per grid power with columns
    ``freq_hz,x_db,y_o_db,y_db``; returns ``{p_dbm: {"x": bw, "y_o": bw, "y": bw}}``
    with the -20 dB bandwidths in Hz.
    """
    ch = cfg.channel_config()
    c = Constellation.square_qam(cfg.m)
    widths = {}
    for p_dbm in cfg.powers_dbm:
        power = dbm_to_watt(p_dbm)
        acc = {"x": 0.0, "y_o": 0.0, "y": 0.0}
        for b in range(cfg.psd_blocks):
            block = SymbolBlock(substream(cfg.seed, 4, b).integers(0, cfg.m, cfg.n_b), cfg.m)
            x = conventional_tx(block, c, power, ch, cfg.span)
            y_o = ssfm_propagate(dac(x, ch), ch, [cfg.seed, 5, b])
            y = adc(y_o, ch)
            for name, sig in (("x", x), ("y_o", y_o), ("y", y)):
                f, psd_db = welch_psd(sig, cfg.psd_segment)
                acc[name] = acc[name] + 10 ** (psd_db / 10)
        rows = [f]
        widths[p_dbm] = {}
        for name in ("x", "y_o", "y"):
            lin = acc[name]
            db = 10 * np.log10(np.maximum(lin / lin.max(), 1e-300))
            rows.append(db)
            widths[p_dbm][name] = bandwidth_at_level(f, db)
        np.savetxt(run_dir / f"psd_{_power_tag(p_dbm)}.csv", np.column_stack(rows), delimiter=",",
                   header="freq_hz,x_db,y_o_db,y_db", comments="", fmt="%.17g")
    with open(run_dir / "psd_bandwidth.csv", "w") as fh:
        fh.write("p_dbm,bw20_x_hz,bw20_y_o_hz,bw20_y_hz\n")
        for p_dbm, w in widths.items():
            fh.write(f"{p_dbm:.17g},{w['x']:.17g},{w['y_o']:.17g},{w['y']:.17g}\n")
    return widths


def emit_learned_report(checkpoint, run_dir: Path) -> dict:
    """Constellation and single-pulse CSVs for a trained checkpoint."""
    res, meta = load_checkpoint(checkpoint)
    ch_d = dict(meta["config"]["channel"])
    ch = ChannelConfig(**ch_d)
    power = float(meta["config"]["launch_power"])
    return export_learned_artifacts(res.tx, ch, power, run_dir)


def conventional_artifacts(cfg: ExperimentConfig, run_dir: Path, p_dbm: float) -> dict:
    """Constellation and pulse CSVs of the baseline transmitter (square QAM, sinc)."""
    ch = cfg.channel_config()
    tx = AeTxParams.conventional(cfg.m, ch.osf, cfg.span)
    return export_learned_artifacts(tx, ch, dbm_to_watt(p_dbm), run_dir)


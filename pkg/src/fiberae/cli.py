"""Command line entry point: ``fiberae {sweep,train,report,gradcheck,selftest}``.

Exit codes: 0 success, 1 usage or config error, 2 numerical divergence or a
failed numerical check, 3 internal error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path

from .autoencoder import ConfigMismatchError
from .experiment import (
    ConfigError,
    attach_log,
    conventional_artifacts,
    detach_log,
    emit_learned_report,
    emit_psd_report,
    load_config,
    prepare_run_dir,
    resolve_config,
    run_sweep,
    run_training,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=("desk", "full"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output root; results go to <out>/<run-id>/")
    p.add_argument("--power-dbm", type=float, action="append", dest="powers_dbm",
                   help="launch power in dBm (repeatable)")
    p.add_argument("--channel", choices=("a", "ad", "adn"))
    p.add_argument("--system", choices=("conv", "ae"))
    p.add_argument("--n-adj", type=int, dest="n_adj")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any other config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fiberae", description="Fiber channel autoencoder experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sweep", help="SE over launch power for the baseline or the autoencoder")
    _common(p)

    p = sub.add_parser("train", help="train one autoencoder at the first grid power")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("report", help="PSD report, or learned-system report for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="write constellation and pulse CSVs for this checkpoint")

    p = sub.add_parser("gradcheck", help="finite-difference check of the differentiable pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("selftest", help="run the acceptance criteria and report pass/fail")
    _common(p)
    p.add_argument("--quick", action="store_true", help="skip the two training criteria")
    p.add_argument("--only", type=int, action="append", help="criterion number (repeatable)")
    return parser


def _resolve(args):
    from .experiment import parse_config_text

    file_values = load_config(args.config) if args.config else {}
    extra = parse_config_text("\n".join(args.set), "--set") if args.set else {}
    overrides = dict(extra)
    for key in ("preset", "seed", "out", "channel", "system", "n_adj"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.powers_dbm:
        overrides["powers_dbm"] = tuple(args.powers_dbm)
    return resolve_config(file_values, overrides)


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    run_dir = prepare_run_dir(cfg)
    handler = attach_log(run_dir)
    try:
        points = run_sweep(cfg, run_dir)
    finally:
        detach_log(handler)
    print(f"{'p_dbm':>7} {'snr_db':>7} {'mi_bits':>8} {'ser':>8}")
    for pt in points:
        flag = "  diverged" if pt.diverged else ""
        print(f"{pt.p_dbm:7.1f} {pt.snr_db:7.2f} {pt.mi_bits:8.4f} {pt.ser:8.2e}{flag}")
    print(f"wrote {run_dir / 'se.csv'}")
    return EXIT_DIVERGED if any(pt.diverged for pt in points) else EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args).replace(system="ae")
    run_dir = prepare_run_dir(cfg)
    handler = attach_log(run_dir)
    try:
        res = run_training(cfg, run_dir, args.resume)
    finally:
        detach_log(handler)
    if res.diverged:
        print(f"training diverged after {len(res.losses)} steps; partial history in {run_dir}")
        return EXIT_DIVERGED
    print(f"final loss {res.losses[-1]:.5f}  MI {res.mi_bits:.4f} bits  SER {res.ser:.3e}")
    print(f"wrote {run_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _resolve(args)
    run_dir = prepare_run_dir(cfg)
    if args.checkpoint:
        paths = emit_learned_report(args.checkpoint, run_dir)
    else:
        widths = emit_psd_report(cfg, run_dir)
        paths = conventional_artifacts(cfg, run_dir, cfg.powers_dbm[0])
        for p_dbm, w in widths.items():
            print(f"P={p_dbm:6.1f} dBm  -20 dB width: x {w['x'] / 1e9:7.2f} GHz  y_o {w['y_o'] / 1e9:7.2f} GHz")
    for path in paths.values():
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .acceptance import gradcheck_report

    worst = 0.0
    for name, err in gradcheck_report(seed=args.seed):
        worst = max(worst, err)
        print(f"{name:<28} max rel. error {err:.3e}")
    print(f"max rel. error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_DIVERGED


def cmd_selftest(args) -> int:
    from .acceptance import run_selftest

    cfg = _resolve(args)
    out = Path(cfg.out) / f"selftest-s{cfg.seed}"
    results = run_selftest(out, seed=cfg.seed, quick=args.quick, only=args.only)
    for r in results:
        print(r.line())
    failed = [r for r in results if r.status == "FAIL"]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed; artifacts in {out}")
    return EXIT_OK if not failed else EXIT_DIVERGED


COMMANDS = {
    "sweep": cmd_sweep,
    "train": cmd_train,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception:  # noqa: BLE001 - last-resort reporting
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 infeasible security parameters.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, load_config, published_config, coerce_value
from .errors import ConfigError, InfeasibleSecurityError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3

log = logging.getLogger("rrdps")

_HELP = {
    "L": "pulses per train",
    "mu": "mean photon number per train",
    "total_loss_db": "total loss incl. detection (dB)",
    "excess_loss_db": "extra loss on top of total_loss_db (dB)",
    "visibility": "interference visibility, scalar or comma list per delay",
    "calibration": "phase lock: measured or ideal",
    "mode": "analytic, montecarlo or paper-repro",
    "q": "measured gain per train (analytic input)",
    "sifted": "measured sifted-key length (analytic input)",
    "e_bit": "measured bit error rate (analytic input)",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value config file; flags override it")
    grp = parser.add_argument_group("run configuration")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        grp.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar="X", help=_HELP.get(f.name))
    parser.add_argument("--outdir", type=Path, default=Path("."), help="directory for report files")
    parser.add_argument("--stem", default=None, help="file name prefix for report files")
    parser.add_argument("--no-figures", action="store_true", help="skip rendering figures")


def _build_config(args: argparse.Namespace, base: RunConfig) -> RunConfig:
    if args.config is not None:
        base = load_config(args.config, base)
    changes = {}
    for f in fields(RunConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            changes[f.name] = coerce_value(f.name, raw)
    return base.replace(**changes).validate()


def _print_report(report, paths) -> None:
    for line in report.summary_lines():
        print(line)
    for kind, path in paths.items():
        print(f"wrote {kind:<8} {path}")


def cmd_analytic(args) -> int:
    from .session import emit_report, run_analytic

    base = published_config() if args.paper_repro else RunConfig(mode="analytic")
    config = _build_config(args, base)
    report = run_analytic(config)
    paths = emit_report(report, args.outdir, args.stem or config.mode, figures=not args.no_figures)
    _print_report(report, paths)
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    from .session import emit_report, run_montecarlo

    config = _build_config(args, RunConfig(mode="montecarlo")).replace(mode="montecarlo")
    if config.seed is None:
        raise ConfigError("--seed is required in montecarlo mode")
    if args.dump_sifted is not None:
        with open(args.dump_sifted, "wb") as fh:
            report = run_montecarlo(config, dump=fh)
    else:
        report = run_montecarlo(config)
    paths = emit_report(report, args.outdir, args.stem or "montecarlo", figures=not args.no_figures)
    if args.dump_sifted is not None:
        paths["sifted"] = args.dump_sifted
    _print_report(report, paths)
    return EXIT_OK


def cmd_calibrate_demo(args) -> int:
    from .phaselock import DriftModel, simulate_stability

    config = _build_config(args, RunConfig())
    seed = 0 if config.seed is None else config.seed
    trace = simulate_stability(
        hours=args.hours,
        L=config.L,
        drift_model=DriftModel(config.drift_sigma, config.drift_rate),
        visibility=args.intrinsic_visibility,
        seed=seed,
        locking_window=config.locking_window_ms * 1e-3,
        flux=config.lock_flux,
        efficiency=config.lock_efficiency,
        n_steps=config.phase_steps,
        threshold=args.threshold,
    )
    stem = args.stem or "calibration"
    args.outdir.mkdir(parents=True, exist_ok=True)
    table_path = args.outdir / f"{stem}_per_delay.csv"
    frac = trace.fraction_above()
    with table_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "mean_visibility", "min_visibility", "fraction_above_threshold"])
        for d in range(1, config.L):
            col = trace.visibility[:, d]
            w.writerow([d, repr(float(col.mean())), repr(float(col.min())), repr(float(frac[d]))])
    print(f"simulated {args.hours:g} h, {trace.times.size} checkpoints")
    print(f"delays maintained >= {args.threshold:.0%}: {trace.fraction_maintained():.1%}")
    print(f"wrote table    {table_path}")
    if trace.table is not None:
        lut_path = args.outdir / f"{stem}_lookup.tsv"
        trace.table.save(lut_path)
        print(f"wrote lookup   {lut_path}")
    if not args.no_figures:
        from .plotting import plot_visibility_traces

        shown = [d for d in (15, 100, config.L - 1) if 0 < d < config.L]
        fig = plot_visibility_traces(trace, shown, args.outdir / f"{stem}_visibility.png")
        print(f"wrote figure   {fig}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .session import sweep

    config = _build_config(args, RunConfig(mode="analytic"))
    values = np.linspace(args.start, args.stop, args.steps)
    rows = sweep(config, args.param, values)
    stem = args.stem or f"sweep_{args.param}"
    args.outdir.mkdir(parents=True, exist_ok=True)
    path = args.outdir / f"{stem}.csv"
    cols = ["param", "value", "Q", "e_bit", "n_th", "qh_pa", "rate_per_round", "rate_bps",
            "final_key_length", "insecure", "note"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    print(f"wrote table    {path}")
    if not args.no_figures:
        from .plotting import plot_sweep

        print(f"wrote figure   {plot_sweep(rows, args.outdir / f'{stem}.png')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rrdps", description="Round-robin DPS QKD simulator and key-rate analysis")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    a = sub.add_parser("analytic", help="key rate from measured or modelled Q and e_bit")
    a.add_argument("--paper-repro", action="store_true", help="start from the published run's measured values")
    _add_config_flags(a)
    a.set_defaults(func=cmd_analytic)

    m = sub.add_parser("montecarlo", help="simulate every round end to end")
    m.add_argument("--dump-sifted", type=Path, default=None, help="write framed sifted records here")
    _add_config_flags(m)
    m.set_defaults(func=cmd_montecarlo)

    c = sub.add_parser("calibrate-demo", help="long-run phase-lock stability simulation")
    c.add_argument("--hours", type=float, default=1.0)
    c.add_argument("--intrinsic-visibility", type=float, default=0.985)
    c.add_argument("--threshold", type=float, default=0.96)
    _add_config_flags(c)
    c.set_defaults(func=cmd_calibrate_demo)

    s = sub.add_parser("sweep", help="vary one parameter and tabulate the analytic key rate")
    s.add_argument("--param", required=True)
    s.add_argument("--start", type=float, required=True)
    s.add_argument("--stop", type=float, required=True)
    s.add_argument("--steps", type=int, default=11)
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleSecurityError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``mlmcopt {optimize,estimate,calibrate,plots}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import FULL_SCALE, OUT_ENV, ConfigError, parse_assignment, parse_config
from .experiment import calibrate, emit_plots, run_estimate, run_experiment

log = logging.getLogger("mlmcopt")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="named preset, e.g. problem1-desk")
    p.add_argument("--config", help="JSON or TOML file with RunConfig keys")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="upper bound on estimator parallelism")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./mlmcopt-out)")
    p.add_argument("--tau", type=float, help="gradient-norm tolerance")
    p.add_argument("--method", choices=("ncg", "newton"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--no-timing", action="store_true", help="write zero wall times for byte-stable output")
    p.add_argument("--full-scale", action="store_true", help="allow the L_bar=5 presets")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlmcopt", description="Robust optimal control with MLMC gradients.")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("optimize", help="run NCG or Newton-CG and write tables, trace, fields and plots"))
    est = sub.add_parser("estimate", help="one gradient estimate at u = 0")
    _common(est)
    est.add_argument("--eps", type=float, default=1e-2, help="requested RMSE")
    cal = sub.add_parser("calibrate", help="measure per-level sample cost and fit kappa")
    _common(cal)
    cal.add_argument("--samples", type=int, default=8)
    _common(sub.add_parser("plots", help="rerun deterministically and write only the plot CSVs"))
    return parser


def config_from_args(args: argparse.Namespace):
    overrides = dict(parse_assignment(a) for a in args.set)
    for key in ("seed", "workers", "out", "tau", "method"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.no_timing:
        overrides["timing"] = False
    cfg = parse_config(args.preset, args.config, overrides)
    if cfg.preset in FULL_SCALE and not args.full_scale:
        raise ConfigError("preset", f"{cfg.preset!r} is full scale (L_bar=5); pass --full-scale to run it")
    return cfg


def _log_record(rec) -> None:
    log.info("%s %4d  |g|=%.3e  eps=%.2e  n=%s", rec.phase, rec.index, rec.norm, rec.eps, list(rec.counts))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"mlmcopt: config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "optimize":
        bundle = run_experiment(cfg, write=True, log=_log_record)
        state = "converged" if bundle.converged else "NOT converged"
        print(f"{state}: fresh |g|={bundle.fresh_norm:.3e} after {bundle.iterations} iterations, "
              f"work={bundle.work:.3e} dof; output in {cfg.out}")
        return 0 if bundle.converged else 1
    if args.command == "estimate":
        rep = run_estimate(cfg, args.eps)
        print(f"counts={rep.counts} rho={rep.rho:.3f} rmse_bound={rep.rmse_bound:.3e} converged={rep.converged}")
        return 0
    if args.command == "calibrate":
        res = calibrate(cfg, n=args.samples)
        for level, m, dof, sec in res["levels"]:
            print(f"level {level}: m={m} dof={dof} {sec * 1e3:.3f} ms/sample")
        print(f"kappa={res['kappa']:.3f}")
        return 0
    bundle = run_experiment(cfg, write=False)
    for path in emit_plots(bundle):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

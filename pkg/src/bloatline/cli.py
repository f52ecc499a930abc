"""``bloatline`` command line: equilibrium | sweep | validate | converge | timeplot.

Exit status: 0 success, 2 configuration error, 3 no equilibrium for the
requested scenario.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import equilibrium as eq
from . import experiments as ex
from .core_types import ConfigError, ScenarioConfig, RedProfile, config_hash, load_config

log = logging.getLogger("bloatline")

EXIT_CONFIG = 2
EXIT_NO_EQUILIBRIUM = 3

# RED 10/100/0.1 unless the config file or --set says otherwise
CLI_BASE = ScenarioConfig(red=RedProfile())


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values list {text!r}") from exc


def _emit(out_dir: Path | None, name: str, text: str, to_stdout: bool = True) -> None:
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text)
        log.info("wrote %s", out_dir / name)
    elif to_stdout:
        sys.stdout.write(text)


def _resolve(args) -> ScenarioConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"rng_seed={args.seed}")
    return load_config(args.config, overrides, base=CLI_BASE)


def cmd_equilibrium(args, cfg: ScenarioConfig) -> int:
    if cfg.red is None:
        raise ConfigError("equilibrium needs discipline=red")
    row = ex.equilibrium_row(cfg)
    _emit(args.out, "equilibrium.csv",
          ex.rows_to_csv(ex.EQUILIBRIUM_COLUMNS, [row], config_hash(cfg)))
    return 0 if row["exists"] else EXIT_NO_EQUILIBRIUM


def cmd_sweep(args, cfg: ScenarioConfig) -> int:
    if cfg.red is None:
        raise ConfigError("sweep needs discipline=red")
    if args.sensitivity:
        targets = _parse_values(args.values) if args.values else None
        _emit(args.out, "sensitivity.csv", ex.sensitivity_sweep(cfg, targets).to_csv())
        return 0
    values = _parse_values(args.values) if args.values else ex.default_target_grid(cfg)
    res = ex.sweep_equilibrium(ex.SweepSpec(cfg, args.axis, values))
    _emit(args.out, "sweep.csv", res.to_csv())
    return 0


def cmd_validate(args, cfg: ScenarioConfig) -> int:
    if cfg.red is None:
        raise ConfigError("validate needs discipline=red")
    values = _parse_values(args.values) if args.values else ex.VALIDATION_TARGETS_S
    spec = ex.SweepSpec(cfg, args.axis, values, replications=args.reps, seed=args.seed)
    res = ex.sweep_validation(spec)
    _emit(args.out, "validation.csv", res.to_csv())
    _emit(args.out, "runs.csv", res.runs_csv(), to_stdout=False)
    return 0


def cmd_converge(args, cfg: ScenarioConfig) -> int:
    if cfg.red is None:
        raise ConfigError("converge needs discipline=red")
    if not eq.existence_check(cfg):
        log.error("no equilibrium exists for this configuration")
        return EXIT_NO_EQUILIBRIUM
    seed = cfg.rng_seed if args.seed is None else args.seed
    study = ex.run_convergence_study(cfg, n_starts=args.starts, seed=seed, tol=args.tol,
                                     t_max=args.t_max, include_zero=True)
    _emit(args.out, "convergence.csv", study.summary_csv())
    _emit(args.out, "convergence_errors.csv", study.errors_csv(), to_stdout=False)
    log.info("%d/%d trajectories settled", study.settled_count, len(study.starts))
    return 0


def cmd_timeplot(args, cfg: ScenarioConfig) -> int:
    traj, trace = ex.run_timeplot(cfg, step_s=args.step, seed=args.seed)
    h = config_hash(cfg)
    stride = max(1, int(round(0.01 / args.step)))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        traj.to_csv(args.out / "fluid.csv", every=stride, header_comment=f"config_hash={h}")
        trace.to_csv(args.out / "trace.csv", header_comment=f"config_hash={h}")
    else:
        traj.to_csv(sys.stdout, every=stride, header_comment=f"config_hash={h}")
    return 0


COMMANDS = {
    "equilibrium": cmd_equilibrium,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
    "converge": cmd_converge,
    "timeplot": cmd_timeplot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="RNG seed (overrides rng_seed)")
    common.add_argument("--reps", type=int, default=10, help="packet-sim replications")
    common.add_argument("--out", type=Path, help="directory for CSV output (default: stdout)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bloatline", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("equilibrium", parents=[common], help="solve one equilibrium point")

    p = sub.add_parser("sweep", parents=[common], help="equilibrium over a parameter sweep")
    p.add_argument("--axis", default="ledbat.target_s")
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--sensitivity", action="store_true",
                   help="sweep the target over the min_th x max_p x N grid")

    p = sub.add_parser("validate", parents=[common], help="model vs packet simulation")
    p.add_argument("--axis", default="ledbat.target_s")
    p.add_argument("--values", help="comma-separated axis values")

    p = sub.add_parser("converge", parents=[common], help="multi-start convergence study")
    p.add_argument("--starts", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--t-max", dest="t_max", type=float, default=300.0)

    p = sub.add_parser("timeplot", parents=[common], help="fluid trajectory + packet trace")
    p.add_argument("--step", type=float, default=1e-3, help="RK4 step in seconds")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"bloatline: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except eq.EquilibriumError as exc:
        print(f"bloatline: {exc}", file=sys.stderr)
        return EXIT_NO_EQUILIBRIUM


if __name__ == "__main__":
    sys.exit(main())

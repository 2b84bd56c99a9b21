"""
RH Localization CLI
Command-line front end: single runs, full experiments, parameter sweeps,
configuration checks and single-node information maps.

Usage:
    python rh_localization_cli.py run --config default_experiment.toml --set planner.strategy=dp
    python rh_localization_cli.py experiment --config default_experiment.toml --workers 4
    python rh_localization_cli.py sweep --config default_experiment.toml --key planner.horizon_T --values 1,3,5
    python rh_localization_cli.py validate-config --config default_experiment.toml
    python rh_localization_cli.py information-map --out maps
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import toml

from experiment_harness import (
    CSV_HEADER,
    ExperimentRunner,
    IncompleteExperimentError,
    run_single,
    summarize_run_directory,
    timing_path,
    write_jsonl,
)
from fisher_information import information_map
from rss_model import SIMULATOR_VERSION, Position
from run_config import (
    EXECUTION_KEYS,
    SCHEMA,
    ConfigError,
    build_experiment_config,
    build_planner_config,
    build_scenario_config,
    build_solver_config,
    coerce,
    config_echo,
    dump_config,
    load_config,
    parse_value,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML configuration file")
    common.add_argument("--set", dest="overrides", metavar="KEY=VALUE", action="append", default=[],
                        help="Override a configuration key (repeatable), e.g. planner.horizon_T=3")
    common.add_argument("--out", metavar="DIR", help="Output directory (output.dir)")
    common.add_argument("--workers", type=int, metavar="N", help="Worker processes (experiment.workers)")
    common.add_argument("--seed", type=int, metavar="U64", help="Master seed (scenario.seed)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="No progress bar, errors only")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="rh_localization_cli.py",
        description="Information-driven receding-horizon localization of RSS sensor nodes",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    subparsers.add_parser("run", parents=[common], help="One closed-loop run of planner.strategy")

    experiment = subparsers.add_parser("experiment", parents=[common],
                                       help="Paired Monte Carlo comparison of experiment.strategies")
    experiment.add_argument("--summarize-only", action="store_true",
                            help="Summarize existing run files without running anything")

    sweep = subparsers.add_parser("sweep", parents=[common], help="Run the experiment once per value of a key")
    sweep.add_argument("--key", required=True, help="Dotted configuration key to sweep")
    sweep.add_argument("--values", required=True, help="Comma-separated values, e.g. 1,3,5")

    subparsers.add_parser("validate-config", parents=[common], help="Check a configuration and print it resolved")

    info = subparsers.add_parser("information-map", parents=[common],
                                 help="Single-measurement information landscape around one node")
    info.add_argument("--gamma", type=float, default=7.5, help="Node path-loss exponent")
    info.add_argument("--k-gain", type=float, default=-20.0, help="Node gain, dB")
    info.add_argument("--node", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "Z"))
    info.add_argument("--noise-var", type=float, default=1.0, help="Measurement noise variance, dB^2")
    info.add_argument("--height", type=float, default=20.0, help="Agent height of the grid, meters")
    info.add_argument("--extent", type=float, default=100.0, help="Grid half-width, meters")
    info.add_argument("--spacing", type=float, default=2.0, help="Grid spacing, meters")
    info.add_argument("--epsilon-reg", type=float, default=1e-6, help="Regularizer of the trace of the inverse")
    return parser


def _configure_logging(args):
    level = logging.DEBUG if args.verbose else (logging.ERROR if args.quiet else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def resolve_config(args) -> Dict[str, Any]:
    extra = {"scenario.seed": args.seed, "experiment.workers": args.workers, "output.dir": args.out}
    return load_config(args.config, args.overrides, extra)


def _header(title: str):
    print("=" * 60)
    print(title)
    print("=" * 60)


def cmd_run(flat: Dict[str, Any], args) -> int:
    """One rh_loop; writes run_<label>_seed<seed>.jsonl and prints the final errors."""
    scenario_cfg = build_scenario_config(flat)
    planner_cfg = build_planner_config(flat)
    solver_cfg = build_solver_config(flat)
    realization = flat["experiment.realization"]

    _header(f"Receding-horizon run: {planner_cfg.label}, seed {scenario_cfg.seed}")
    run_log = run_single(scenario_cfg, planner_cfg, solver_cfg, realization, config_echo(flat))

    out_dir = Path(flat["output.dir"])
    path = out_dir / f"run_{planner_cfg.label}_seed{scenario_cfg.seed}.jsonl"
    write_jsonl(timing_path(path), run_log.timing_records())
    write_jsonl(path, run_log.to_records())

    print(f"{'node':<6}{'location m':>12}{'gamma err':>12}{'K err dB':>12}")
    for j, e in enumerate(run_log.node_errors, 1):
        print(f"{j:<6}{e['location_err_m']:>12.3f}{e['gamma_err']:>12.3f}{e['k_err_db']:>12.3f}")
    final = run_log.steps[-1]
    if final.fitness is None:
        print("✗ Final fitness: information matrix is singular")
    else:
        print(f"Final fitness tr(F^-1): {final.fitness:.6g}")
    print(f"\n✓ Run log saved to: {path}")
    return EXIT_OK


def _run_experiment_dir(flat: Dict[str, Any], out_dir: Path, progress: bool):
    cfg = build_experiment_config(flat)
    with ExperimentRunner(cfg, out_dir=str(out_dir), progress=progress, config_echo=config_echo(flat)) as runner:
        return runner.run()


def cmd_experiment(flat: Dict[str, Any], args) -> int:
    out_dir = Path(flat["output.dir"])
    if args.summarize_only:
        try:
            summary = summarize_run_directory(out_dir)
        except IncompleteExperimentError as e:
            print(f"✗ Refusing to summarize: {e.missing} of {e.total} runs missing", file=sys.stderr)
            return EXIT_FAILURE
        except FileNotFoundError as e:
            print(f"✗ {e}", file=sys.stderr)
            return EXIT_FAILURE
    else:
        cfg = build_experiment_config(flat)
        _header(f"Experiment: {len(cfg.strategies)} strategies x {cfg.n_realizations} realizations")
        summary = _run_experiment_dir(flat, out_dir, progress=not args.quiet)

    summary.print_tables()
    print(f"\n✓ Summary saved to: {out_dir / 'summary.csv'}")
    return EXIT_OK


def parse_sweep_values(text: str) -> List[Tuple[str, Any]]:
    """Split a comma-separated value list into (name, parsed value) pairs."""
    try:
        values = toml.loads(f"values = [{text}]")["values"]
        return [(_value_name(v), v) for v in values]
    except toml.TomlDecodeError:
        items = [item.strip() for item in text.split(",") if item.strip()]
        return [(item, parse_value(item)) for item in items]


def _value_name(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return "_".join(_value_name(v) for v in value)
    return str(value)


def cmd_sweep(flat: Dict[str, Any], args) -> int:
    key = args.key
    if key not in SCHEMA or key in EXECUTION_KEYS:
        raise ConfigError("not a sweepable configuration key", key)
    values = parse_sweep_values(args.values)
    if not values:
        raise ConfigError("no values to sweep", key)

    variants = []
    for name, value in values:
        variant = dict(flat)
        variant[key] = coerce(key, value)
        build_experiment_config(variant)
        variants.append((name, variant))

    sweep_dir = Path(flat["output.dir"]) / f"sweep_{key}"
    rows = []
    for name, variant in variants:
        _header(f"Sweep {key} = {name}")
        summary = _run_experiment_dir(variant, sweep_dir / name, progress=not args.quiet)
        summary.print_tables()
        rows.extend([name] + r.as_row() for r in summary.error_rows + summary.timing_rows)

    manifest = {"version": SIMULATOR_VERSION, "key": key, "values": [name for name, _ in variants],
                "config": config_echo(flat)}
    with open(sweep_dir / "sweep.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    path = sweep_dir / "sweep_summary.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["value"] + CSV_HEADER)
        writer.writerows(rows)
    print(f"\n✓ Sweep summary saved to: {path}")
    return EXIT_OK


def cmd_validate(flat: Dict[str, Any], args) -> int:
    print(f"✓ Configuration is valid ({len(flat)} keys)")
    print(dump_config(flat))
    return EXIT_OK


def cmd_information_map(flat: Dict[str, Any], args) -> int:
    if args.spacing <= 0 or args.extent <= 0:
        raise ConfigError("--spacing and --extent must be positive")
    if args.noise_var <= 0:
        raise ConfigError("--noise-var must be positive")
    node = Position(*args.node)
    grid = np.arange(-args.extent, args.extent + 0.5 * args.spacing, args.spacing)
    xs, ys = grid + node.x, grid + node.y
    params = np.array([args.gamma, args.k_gain, node.x, node.y, node.z])
    maps = information_map(params, args.noise_var, xs, ys, args.height, args.epsilon_reg)

    out_dir = Path(flat["output.dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "information_map.csv"
    columns = ("gamma", "sx", "sy", "sz", "trace_inverse")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x", "y"] + list(columns))
        for iy, y in enumerate(ys):
            for ix, x in enumerate(xs):
                writer.writerow([repr(float(x)), repr(float(y))] +
                                [repr(float(maps[c][iy, ix])) for c in columns])
    meta = {"version": SIMULATOR_VERSION, "node": list(args.node), "gamma": args.gamma, "k_gain": args.k_gain,
            "noise_var": args.noise_var, "height": args.height, "epsilon_reg": args.epsilon_reg,
            "extent": args.extent, "spacing": args.spacing, "config": config_echo(flat)}
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    print(f"✓ Information map ({len(xs)} x {len(ys)} cells) saved to: {path}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "experiment": cmd_experiment,
    "sweep": cmd_sweep,
    "validate-config": cmd_validate,
    "information-map": cmd_information_map,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)

    try:
        flat = resolve_config(args)
        return COMMANDS[args.command](flat, args)
    except ConfigError as e:
        print(f"✗ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.debug("Command failed", exc_info=True)
        print(f"✗ {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

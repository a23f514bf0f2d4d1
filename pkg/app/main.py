# app/main.py

import logging
import os
import sys
import argparse
from typing import Any, Dict, List, Optional

from app.config.loader import load_config, ConfigError
from app.config.model_spec import ModelSpec, ModelSpecError, load_model_spec
from app.core.settings import APP_NAME, APP_VERSION, DEFAULT_LOG_LEVEL, log_current_settings
from app.database import archive
from app.database.archive import ArchiveError
from app.database.base import configure_database, init_db
from app.services.model import CountLimitExceeded, InvalidModelError, check_stability
from app.services.reports import ReportError, write_frame, write_simulation_outputs, write_solve_outputs, write_sweep_tables
from app.services.simulator import InvalidSimulationConfig, SimulationConfig, simulate
from app.services.solver import SolverError, UnstableModel, solve
from app.tasks.compare import run_compare
from app.tasks.sweep import SweepError, SweepOptions, run_sweep

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

COMPARE_FILE = "compare.csv"


def setup_logging(debug: bool = False) -> logging.Logger:
    """Configure logging for the application."""
    log_level = logging.DEBUG if debug else DEFAULT_LOG_LEVEL
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s [%(levelname)s] %(name)s - %(message)s"
    )
    return logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Path to the JSON configuration file (default: configs/config.json if present)")
    common.add_argument("--debug", action="store_true", help="Enable debug logging")
    common.add_argument("--out", default=None, help="Output directory (default: output.dir from configuration)")
    common.add_argument("--db", default=None, help="SQLAlchemy URL of the results archive")

    simulation = argparse.ArgumentParser(add_help=False)
    simulation.add_argument("--seed", type=int, default=None, help="Master seed")
    simulation.add_argument("--slots", type=int, default=None, help="Measured slots per replication")
    simulation.add_argument("--warmup", type=int, default=None, help="Warm-up slots per replication")
    simulation.add_argument("--reps", type=int, default=None, help="Number of replications")
    simulation.add_argument("--workers", type=int, default=None, help="Worker processes")

    parser = argparse.ArgumentParser(
        prog="fcfm-matching",
        description=f"{APP_NAME} {APP_VERSION}: analytic and simulated performance of FCFM bipartite matching models."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text, parents in (
        ("check", "Check stability and report the tightest set", [common]),
        ("solve", "Solve the stationary metrics analytically", [common]),
        ("simulate", "Estimate the metrics by simulation", [common, simulation]),
        ("compare", "Solve and simulate, then compare with z-scores", [common, simulation]),
        ("sweep", "Solve across the model's parameter grid", [common, simulation]),
    ):
        sub = commands.add_parser(name, help=help_text, parents=parents)
        sub.add_argument("model", help="Path to the model JSON file")
        if name == "sweep":
            sub.add_argument("--with-sim", action="store_true", default=None, help="Also simulate every grid value")
        else:
            sub.add_argument("--parameter", type=float, default=None, help="Evaluate the sweep bindings at this value")
    return parser


def simulation_config(config: Dict[str, Any], args: argparse.Namespace) -> SimulationConfig:
    """Configuration values overridden by command-line flags."""
    section = dict(config["simulation"])
    for key, flag in (
        ("seed", "seed"),
        ("measured_slots", "slots"),
        ("warmup_slots", "warmup"),
        ("replications", "reps"),
        ("workers", "workers"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            section[key] = value
    return SimulationConfig.from_dict(section)


def _archive(config: Dict[str, Any], args: argparse.Namespace):
    """Return the archive module when an archive URL is configured."""
    url = args.db or config["database"]["url"]
    if not url:
        return None
    configure_database(url)
    init_db()
    return archive


def cmd_check(spec: ModelSpec, config: Dict[str, Any], args: argparse.Namespace) -> int:
    graph, arrivals = spec.build(args.parameter)
    verdict = check_stability(graph, arrivals, max_sets=config["solver"]["max_independent_sets"])
    print(verdict.describe(graph))
    return EXIT_OK if verdict.stable else EXIT_FAILED


def cmd_solve(spec: ModelSpec, config: Dict[str, Any], args: argparse.Namespace, out_dir: str) -> int:
    graph, arrivals = spec.build(args.parameter)
    report = solve(
        graph,
        arrivals,
        max_sets=config["solver"]["max_independent_sets"],
        near_instability_threshold=config["solver"]["near_instability_threshold"]
    )
    paths = write_solve_outputs(report, out_dir, config["output"]["significant_digits"])
    print(f"π(∅) = {report.pi_empty:.12g}; wrote {', '.join(paths)}")
    for warning in report.warnings:
        print(f"Warning: {warning}")

    archive = _archive(config, args)
    if archive is not None:
        archive.archive_report(report, "solve", spec.name, args.parameter)
    return EXIT_OK


def cmd_simulate(spec: ModelSpec, config: Dict[str, Any], args: argparse.Namespace, out_dir: str) -> int:
    graph, arrivals = spec.build(args.parameter)
    sim_config = simulation_config(config, args)
    estimate = simulate(graph, arrivals, sim_config)
    path = write_simulation_outputs(estimate, out_dir, config["output"]["significant_digits"])
    print(f"Wrote {path}")
    for advisory in estimate.advisories:
        print(f"Advisory: {advisory}")

    archive = _archive(config, args)
    if archive is not None:
        stable = check_stability(graph, arrivals, max_sets=config["solver"]["max_independent_sets"]).stable
        archive.archive_estimate(estimate, spec.name, args.parameter, stable=stable)
    return EXIT_OK


def cmd_compare(spec: ModelSpec, config: Dict[str, Any], args: argparse.Namespace, out_dir: str) -> int:
    graph, arrivals = spec.build(args.parameter)
    _, _, comparison = run_compare(
        graph,
        arrivals,
        simulation_config(config, args),
        max_sets=config["solver"]["max_independent_sets"],
        near_instability_threshold=config["solver"]["near_instability_threshold"]
    )

    frame = comparison.to_frame()
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    write_frame(frame, os.path.join(out_dir, COMPARE_FILE), config["output"]["significant_digits"])
    if comparison.passed:
        print(f"All {len(comparison.rows)} metrics within |z| <= {comparison.threshold:g}")
        return EXIT_OK
    print(f"{len(comparison.failures)} metric(s) with |z| > {comparison.threshold:g}")
    return EXIT_FAILED


def cmd_sweep(spec: ModelSpec, config: Dict[str, Any], args: argparse.Namespace, out_dir: str) -> int:
    if spec.sweep is None:
        raise ModelSpecError("sweep needs a model with a sweep section", field_path="sweep", source=args.model)
    with_sim = config["sweep"]["with_sim"] if args.with_sim is None else args.with_sim
    options = SweepOptions(
        max_sets=config["solver"]["max_independent_sets"],
        near_instability_threshold=config["solver"]["near_instability_threshold"],
        workers=args.workers or config["sweep"]["workers"],
        simulation=simulation_config(config, args) if with_sim else None
    )
    result = run_sweep(spec, options)
    paths = write_sweep_tables(result.tables(), out_dir, config["output"]["significant_digits"])
    print(f"Swept {len(result.points)} values of {spec.sweep.parameter}; wrote {len(paths)} files to {out_dir}")

    archive = _archive(config, args)
    if archive is not None:
        for point in result.points:
            archive.archive_report(point.report, "sweep", spec.name, point.parameter)
            if point.estimate is not None:
                archive.archive_estimate(point.estimate, spec.name, point.parameter, stable=True, command="sweep")
    return EXIT_OK


COMMANDS = {
    "check": lambda spec, config, args, out_dir: cmd_check(spec, config, args),
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def run(argv: Optional[List[str]] = None) -> int:
    """
    Run one command and return its exit status.

    0: success; 1: unstable model, failed check or comparison, size cap
    exceeded, or unexpected error; 2: usage, configuration or model file error.
    """
    # 1. Parse Command-Line Arguments
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    # 2. Configure Logging
    logger = setup_logging(args.debug)
    if args.debug:
        log_current_settings()
    logger.debug(f"Running '{args.command}' on {args.model}")

    try:
        # 3. Load Configuration and Model
        config = load_config(config_path=args.config)
        spec = load_model_spec(args.model)
        out_dir = args.out or config["output"]["dir"]

        # 4. Dispatch
        return COMMANDS[args.command](spec, config, args, out_dir)

    except (ConfigError, ModelSpecError, InvalidModelError, InvalidSimulationConfig) as e:
        logger.error(str(e))
        print(f"\nInput Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UnstableModel as e:
        print(f"Unstable model: {e}", file=sys.stderr)
        return EXIT_FAILED
    except (SweepError, SolverError, CountLimitExceeded, ReportError, ArchiveError) as e:
        logger.error(str(e))
        print(f"\nError: {e}", file=sys.stderr)
        return EXIT_FAILED
    except Exception as e:
        logger.exception("Unexpected error occurred:")
        print("\nUnexpected Error:", file=sys.stderr)
        print(f"{e.__class__.__name__}: {str(e)}", file=sys.stderr)
        if args.debug:
            raise  # Re-raise in debug mode for full traceback
        return EXIT_FAILED


def main():
    """
    Main entry point for the fcfm-matching command.
    """
    sys.exit(run())


if __name__ == "__main__":
    main()

"""
Command-line interface: run scenario files, list and verify the built-ins.

Exit codes: 0 every check passed, 1 a check failed or a computation broke
down, 2 invalid input (bad scenario, impossible energy, missing file).
"""
import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

from src.apps.reporting import sha256_file, summary_line, write_json
from src.apps.scenarios import (
    Scenario,
    builtin_names,
    builtin_path,
    load_builtin,
    load_scenario_file,
    run_scenario,
)
from src.utils.error_handler import (
    EXIT_CHECK_FAILED,
    EXIT_PASS,
    ToolkitError,
    handle_error,
)
from src.utils.logging_setup import setup_logging
from src.utils.performance_utils import run_parallel
from src.utils.settings import APP_VERSION, default_output_dir

logger = logging.getLogger(__name__)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sundman",
        description="Sundman reparametrization and geometric mechanics checks",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output (-vv for debug)")
    parser.add_argument("-q", "--quiet", action="store_true", help="errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a scenario file (or a built-in by name)")
    run.add_argument("scenario", help="path to a scenario JSON file")
    run.add_argument("--out", type=Path, default=None, help="output directory (default: $SUNDMAN_OUTPUT_DIR or ./output)")
    run.add_argument("--seed", type=int, default=None, help="sample seed (default: the scenario's, else 0)")
    run.add_argument("--with-runtime", action="store_true", help="record wall time in report.json")

    commands.add_parser("list-builtins", help="list the built-in scenarios")

    verify = commands.add_parser("verify-all", help="run every built-in scenario")
    verify.add_argument("--jobs", type=_positive_int, default=1, help="scenarios to run concurrently (default: 1)")
    verify.add_argument("--seed", type=int, default=0, help="sample seed (default: 0)")
    verify.add_argument("--out", type=Path, default=None, help="output directory")
    verify.add_argument("--with-runtime", action="store_true", help="record wall time in the reports")

    emit = commands.add_parser("emit", help="run a built-in and write its scenario, trajectories and report")
    emit.add_argument("name", help="built-in scenario name")
    emit.add_argument("--out", type=Path, required=True, help="output directory")
    emit.add_argument("--seed", type=int, default=None, help="sample seed")
    return parser


def _resolve(argument: str) -> Scenario:
    path = Path(argument)
    if not path.exists() and argument in builtin_names():
        return load_builtin(argument)
    return load_scenario_file(path)


def cmd_run(args) -> int:
    out_dir = args.out or default_output_dir()
    try:
        scenario = _resolve(args.scenario)
        report = run_scenario(scenario, out_dir, seed=args.seed, with_runtime=args.with_runtime)
    except ToolkitError as e:
        return handle_error(e)
    print(summary_line(report))
    for failure in report.failures[1:]:
        print(f"   also failed: {failure.label} = {failure.value:.3e}")
    print(f"📁 {out_dir / scenario.name}")
    return EXIT_PASS if report.passed else EXIT_CHECK_FAILED


def cmd_list_builtins(args) -> int:
    for name in builtin_names():
        try:
            scenario = load_builtin(name)
        except ToolkitError as e:
            return handle_error(e)
        print(f"{name:28s} {scenario.kind:11s} {scenario.description}")
    return EXIT_PASS


def _verify_one(name: str, out_dir: Path, seed: int, with_runtime: bool):
    """Run one built-in; returns (name, report or None, exit code, error text)."""
    try:
        report = run_scenario(load_builtin(name), out_dir, seed=seed, with_runtime=with_runtime)
    except ToolkitError as e:
        return name, None, e.exit_code, str(e)
    return name, report, EXIT_PASS if report.passed else EXIT_CHECK_FAILED, ""


def cmd_verify_all(args) -> int:
    out_dir = args.out or default_output_dir()
    names = builtin_names()
    logger.info("verifying %d built-in scenarios with %d job(s)", len(names), args.jobs)
    results = run_parallel(
        lambda name: _verify_one(name, out_dir, args.seed, args.with_runtime),
        names,
        jobs=args.jobs,
    )

    entries = []
    exit_code = EXIT_PASS
    for name, report, code, error in results:
        exit_code = max(exit_code, code)
        if report is None:
            print(f"❌ {name}: ERROR {error}")
            entries.append({"name": name, "passed": False, "error": error})
            continue
        print(summary_line(report))
        entries.append({
            "name": name,
            "passed": report.passed,
            "report": sha256_file(out_dir / name / "report.json"),
        })

    summary = {
        "version": APP_VERSION,
        "seed": args.seed,
        "passed": exit_code == EXIT_PASS,
        "scenarios": entries,
    }
    write_json(summary, out_dir / "verify-all.json")
    passed = sum(1 for entry in entries if entry["passed"])
    print(f"{'✅' if exit_code == EXIT_PASS else '❌'} {passed}/{len(entries)} built-in scenarios passed")
    return exit_code


def cmd_emit(args) -> int:
    try:
        scenario = load_builtin(args.name)
        report = run_scenario(scenario, args.out, seed=args.seed)
    except ToolkitError as e:
        return handle_error(e)
    shutil.copyfile(builtin_path(args.name), args.out / scenario.name / "scenario.json")
    print(summary_line(report))
    print(f"📁 {args.out / scenario.name}")
    return EXIT_PASS if report.passed else EXIT_CHECK_FAILED


COMMANDS = {
    "run": cmd_run,
    "list-builtins": cmd_list_builtins,
    "verify-all": cmd_verify_all,
    "emit": cmd_emit,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, level="ERROR" if args.quiet else None)
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("Interrupted", file=sys.stderr)
        return EXIT_CHECK_FAILED

"""
Command line interface.

Exit codes: `0` success, `1` configuration error, `2` any other error or an incomplete experiment,
`3` a failed acceptance check.
"""

from __future__ import annotations

import argparse
import logging
from collections.abc import Sequence

from surelab.acceptance import check_gradient, log_results, run_theory_suite, theory_checks
from surelab.config import ExperimentConfig, apply_overrides, parse_config
from surelab.errors import ConfigError, SurelabError
from surelab.experiment import resume_experiment, run_experiment, write_theory_tables
from surelab.io.configfile import ConfigFile
from surelab.logs import configure_logging
from surelab.paths import ensure_dir
from surelab.report import emit_report
from surelab.tasks import bayes_accuracy, generate_stream

_LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ERROR = 2
EXIT_CHECK = 3


def load_config(path: str | None, overrides: Sequence[str]) -> ExperimentConfig:
    if path is None:
        return parse_config(apply_overrides({}, overrides))
    return ConfigFile(path).get_config(overrides)


def _run(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    result = run_experiment(config, args.out)
    _LOG.info("Wrote %d runs to %s.", len(result.cells), result.output_dir)
    return EXIT_OK if result.complete else EXIT_ERROR


def _resume(args: argparse.Namespace) -> int:
    result = resume_experiment(args.directory)
    return EXIT_OK if result.complete else EXIT_ERROR


def _report(args: argparse.Namespace) -> int:
    result = emit_report(args.directory, check=args.check)
    _LOG.info("Wrote %d report files.", len(result.paths))
    if args.check and not log_results(result.checks):
        return EXIT_CHECK
    return EXIT_OK


def _theory(args: argparse.Namespace) -> int:
    suite = run_theory_suite(n_seeds=args.seeds, quick=args.quick)
    for path in write_theory_tables(ensure_dir(args.out), suite):
        _LOG.info("Wrote %s.", path)
    correlation = suite.correlation
    _LOG.info(
        "Surprise vs gradient norm: rho=%.3f [%.3f, %.3f], n=%d.",
        correlation.rho,
        correlation.ci_low,
        correlation.ci_high,
        correlation.n,
    )
    return EXIT_OK if log_results(theory_checks(suite)) else EXIT_CHECK


def _grad_check(args: argparse.Namespace) -> int:
    return EXIT_OK if log_results([check_gradient(args.tolerance)]) else EXIT_CHECK


def _stream_preview(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    stream = generate_stream(config.stream.spec, config.stream.n_tasks, config.stream.seed)
    for t, task in enumerate(stream):
        print(
            f"task {t}: labels {list(task.label_tokens)},"
            f" {len(task.train)} train / {len(task.test)} test,"
            f" Bayes accuracy {bayes_accuracy(stream, t):.3f}"
            f" (across tasks {bayes_accuracy(stream, t, across_tasks=True):.3f})"
        )
        for example in task.train[: args.examples]:
            print("   ", " ".join(str(token) for token in example.tokens))
    return EXIT_OK


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML configuration file. Defaults apply if omitted.")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration value. Can be repeated.",
    )


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surelab",
        description="Surprise-prioritised replay and slow-weight consolidation experiments.",
    )
    parser.add_argument("--log-level", default="INFO", help="Logging level.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run = subparsers.add_parser("run", help="Run the grid of an experiment configuration.")
    _add_config_arguments(run)
    run.add_argument("--out", help="Output directory. Overrides run.output_dir.")
    run.set_defaults(handler=_run)

    resume = subparsers.add_parser("resume", help="Continue an interrupted experiment.")
    resume.add_argument("directory", help="Output directory of the experiment.")
    resume.set_defaults(handler=_resume)

    report = subparsers.add_parser("report", help="Write summary tables of an experiment.")
    report.add_argument("directory", help="Output directory of the experiment.")
    report.add_argument(
        "--check", action="store_true", help="Also run the directional checks on the summary."
    )
    report.set_defaults(handler=_report)

    theory = subparsers.add_parser("theory", help="Run and check the theory experiments.")
    theory.add_argument("--out", default="surelab-out", help="Output directory.")
    theory.add_argument("--seeds", type=int, default=20, help="Number of seeds.")
    theory.add_argument("--quick", action="store_true", help="Shorter runs, fewer seeds.")
    theory.set_defaults(handler=_theory)

    grad_check = subparsers.add_parser(
        "grad-check", help="Compare gradients of a tiny model with finite differences."
    )
    grad_check.add_argument("--tolerance", type=float, default=1e-3, help="Relative tolerance.")
    grad_check.set_defaults(handler=_grad_check)

    preview = subparsers.add_parser("stream-preview", help="Print the tasks of a stream.")
    _add_config_arguments(preview)
    preview.add_argument(
        "--examples", type=int, default=3, help="Training examples to print per task."
    )
    preview.set_defaults(handler=_stream_preview)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    configure_logging(args.log_level.upper())
    try:
        result: int = args.handler(args)
        return result
    except ConfigError as e:
        _LOG.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except (SurelabError, OSError, ArithmeticError) as e:
        _LOG.error("%s: %s", type(e).__name__, e)
        return EXIT_ERROR

"""
cli.py - Command-line interface for sgstream.

Commands:
- run: Replay one trace (or a directory of traces) and report timing scores
- sweep: Run a trace directory under every setting of a sweep grid
- validate: Validate a trace file (and optionally a config file)
- gen-trace: Write a synthetic trace
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .backend import BackendError, ModelBackend
from .chat_client import RemoteBackend
from .config import Config, ConfigError, default_config, load_config, validate_config
from .harness import ablation_sweep, load_grid, run_suite
from .pipeline import PipelineError
from .prompts import PromptBundle, PromptError, load_prompt_bundle
from .retrieval import RetrievalError
from .scene_graph import SceneGraphError
from .storage import REPORT_FORMATS, StorageError, emit_report, render_jsonl, write_jsonl
from .trace import Trace, TraceValidationError, generate_trace, load_trace, load_trace_dir, trace_to_records

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

RUNTIME_ERRORS = (PipelineError, BackendError, RetrievalError, SceneGraphError, StorageError)


def setup_logging(config: Config) -> None:
    """Configure logging based on config."""
    log_level = getattr(logging, config.logging.level.upper(), logging.INFO)

    # Create logs directory if needed
    log_file = Path(config.logging.file)
    log_file.parent.mkdir(parents=True, exist_ok=True)

    # Reports go to stdout, so log lines go to stderr
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        handlers=[
            logging.FileHandler(log_file, encoding="utf-8"),
            logging.StreamHandler(sys.stderr),
        ],
        force=True,
    )

    # Reduce noise from requests/urllib3
    logging.getLogger("requests").setLevel(logging.WARNING)
    logging.getLogger("urllib3").setLevel(logging.WARNING)


def _load_config(path: Optional[str]) -> Config:
    config = load_config(path) if path else default_config()
    validate_config(config)
    return config


def _load_bundle(config: Config) -> PromptBundle:
    return load_prompt_bundle(config.prompts.dir or None)


def build_backend(config: Config, bundle: PromptBundle) -> Optional[ModelBackend]:
    """Remote backend for backend.kind=remote; None means per-trace scripted playback."""
    if config.backend.kind == "remote":
        return RemoteBackend(config.backend, config.embedder, bundle)
    return None


def _load_traces(path: str) -> list[Trace]:
    if Path(path).is_dir():
        return load_trace_dir(path)
    return [load_trace(path)]


def _print_validation_errors(e: TraceValidationError) -> None:
    print(f"Trace validation failed ({len(e.errors)} problems):", file=sys.stderr)
    for error in e.errors:
        print(f"  - {error}", file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    """
    Replay traces and emit a run report.

    Returns:
        0 on success, 1 on validation failure, 2 on runtime failure
    """
    logger = logging.getLogger(__name__)
    backend: Optional[ModelBackend] = None

    try:
        config = _load_config(args.config)
        setup_logging(config)
        bundle = _load_bundle(config)
        traces = _load_traces(args.trace)

        backend = build_backend(config, bundle)
        report = run_suite(traces, config, bundle, backend)
        text = emit_report(report, args.format, args.report)
        if not args.report:
            sys.stdout.write(text)
        return EXIT_OK

    except FileNotFoundError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, PromptError) as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TraceValidationError as e:
        _print_validation_errors(e)
        return EXIT_VALIDATION
    except RUNTIME_ERRORS as e:
        logger.error(f"Run failed: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_RUNTIME
    finally:
        if backend is not None:
            backend.close()


def cmd_sweep(args: argparse.Namespace) -> int:
    """
    Run every trace in a directory under every grid setting.

    Returns:
        0 on success (an empty grid gives an empty table), 1 on validation
        failure, 2 on runtime failure
    """
    logger = logging.getLogger(__name__)
    backend: Optional[ModelBackend] = None

    try:
        config = _load_config(args.config)
        setup_logging(config)
        bundle = _load_bundle(config)
        grid = load_grid(args.grid)
        traces = load_trace_dir(args.traces)
        logger.info(f"Sweeping {len(traces)} traces over {', '.join(grid) or 'an empty grid'}")

        backend = build_backend(config, bundle)
        report = ablation_sweep(traces, config, grid, bundle, backend)
        text = emit_report(report, args.format, args.report)
        if not args.report:
            sys.stdout.write(text)
        return EXIT_OK

    except FileNotFoundError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, PromptError) as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TraceValidationError as e:
        _print_validation_errors(e)
        return EXIT_VALIDATION
    except RUNTIME_ERRORS as e:
        logger.error(f"Sweep failed: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_RUNTIME
    finally:
        if backend is not None:
            backend.close()


def cmd_validate(args: argparse.Namespace) -> int:
    """
    Validate a trace file and, if given, a config file.

    Returns:
        0 if valid, 1 otherwise
    """
    try:
        if args.config:
            config = _load_config(args.config)
            print(f"Configuration validation passed: {args.config}")
            print(f"  - Backend: {config.backend.kind}")
            print(f"  - Guidance / embed / context: {config.pipeline.guidance_mode} / "
                  f"{config.pipeline.embed_mode} / {config.pipeline.context_mode}")

        trace = load_trace(args.trace)
        print(f"Trace validation passed: {args.trace}")
        print(f"  - Trace ID: {trace.trace_id}")
        print(f"  - Frames: {len(trace.frames)} at {trace.fps} FPS ({trace.meta.policy})")
        print(f"  - Scene graph outputs: {len(trace.sgg)}")
        print(f"  - Scripted decisions: {len(trace.decisions)} (fallback: {trace.meta.decision_fallback})")
        if trace.query is not None:
            print(f"  - Query ({trace.query.mode}) at {trace.query.t_ask}s: {trace.query.text}")
        if trace.ground_truth is not None:
            print(f"  - Ground truth window: [{trace.ground_truth.t_lo}, {trace.ground_truth.t_hi}]")
        return EXIT_OK

    except FileNotFoundError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, PromptError) as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TraceValidationError as e:
        _print_validation_errors(e)
        return EXIT_VALIDATION


def cmd_gen_trace(args: argparse.Namespace) -> int:
    """
    Write a synthetic trace as JSONL (stdout without --out).

    Returns:
        0 on success, 1 on bad arguments, 2 if the file cannot be written
    """
    try:
        trace = generate_trace(args.seed, args.frames, window=args.window, fps=args.fps)
    except ValueError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    records = trace_to_records(trace)
    if not args.out:
        sys.stdout.write(render_jsonl(records))
        return EXIT_OK

    try:
        write_jsonl(records, args.out)
    except StorageError as e:
        print(f"Storage error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"Wrote trace {trace.trace_id} ({len(trace.frames)} frames) to {args.out}")
    return EXIT_OK


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config", "-c",
        default=None,
        help="Path to config file (default: built-in defaults)",
    )


def _add_report_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--report", "-o",
        default=None,
        help="Write the report to this file (default: stdout)",
    )
    parser.add_argument(
        "--format", "-f",
        choices=REPORT_FORMATS,
        default="json",
        help="Report format (default: json)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgstream",
        description="Scene-graph-driven proactive streaming video orchestration",
    )

    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # run command
    run_parser = subparsers.add_parser("run", help="Replay a trace and score response timing")
    run_parser.add_argument("--trace", "-t", required=True, help="Trace file or directory of traces")
    _add_config_arg(run_parser)
    _add_report_args(run_parser)

    # sweep command
    sweep_parser = subparsers.add_parser("sweep", help="Run an ablation sweep over a trace directory")
    sweep_parser.add_argument("--traces", required=True, help="Directory of *.jsonl traces")
    sweep_parser.add_argument("--grid", "-g", required=True, help="YAML sweep grid")
    _add_config_arg(sweep_parser)
    _add_report_args(sweep_parser)

    # validate command
    validate_parser = subparsers.add_parser("validate", help="Validate a trace file")
    validate_parser.add_argument("--trace", "-t", required=True, help="Trace file")
    _add_config_arg(validate_parser)

    # gen-trace command
    gen_parser = subparsers.add_parser("gen-trace", help="Write a synthetic trace")
    gen_parser.add_argument("--seed", type=int, required=True, help="Random seed")
    gen_parser.add_argument("--frames", type=int, required=True, help="Number of frames")
    gen_parser.add_argument("--window", type=int, default=4, help="Clip window in frames (default: 4)")
    gen_parser.add_argument("--fps", type=float, default=1.0, help="Sampling rate (default: 1.0)")
    gen_parser.add_argument("--out", default=None, help="Output file (default: stdout)")

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command is None:
        parser.print_help()
        return EXIT_VALIDATION

    if args.command == "run":
        return cmd_run(args)
    elif args.command == "sweep":
        return cmd_sweep(args)
    elif args.command == "validate":
        return cmd_validate(args)
    elif args.command == "gen-trace":
        return cmd_gen_trace(args)
    else:
        parser.print_help()
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

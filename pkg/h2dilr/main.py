"""Command-line entrypoint.

    h2dilr <command> --config run.cfg [--set key=value ...]

Exit codes: 0 success, 1 validation error (bad config, missing data,
mismatched checkpoint), 2 runtime failure.
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from pydantic import ValidationError

from h2dilr.commands import HANDLERS
from h2dilr.core.logging import configure_logging
from h2dilr.models.config import LabelKind, Representation
from h2dilr.services.probe import DEFAULT_NUS
from h2dilr.services.runconfig import load_run_config, write_echo

logger = logging.getLogger("h2dilr.main")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2


def build_parser() -> argparse.ArgumentParser:
    """Subcommands and their shared options."""
    parser = argparse.ArgumentParser(
        prog="h2dilr", description="Multi-subject neural tokenization and decoding on synthetic recordings"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value run configuration")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key"
    )
    common.add_argument("--log-level", default=None, help="overrides H2DILR_LOG_LEVEL")
    common.add_argument("--data-dir", default=None, help="dataset root (default data.dir or out_dir/data)")

    commands = parser.add_subparsers(dest="command", required=True, metavar="command")
    commands.add_parser("gen-data", parents=[common], help="generate synthetic subject datasets")
    commands.add_parser("pretrain", parents=[common], help="stage 1: train encoders and codebooks")

    decode = commands.add_parser("train-decoder", parents=[common], help="stage 2: train the neural decoder")
    decode.add_argument("--checkpoint", default=None, help="stage-1 checkpoint (default out_dir/checkpoint_h2d)")
    decode.add_argument("--label", choices=[k.value for k in LabelKind], default=LabelKind.TONE.value)
    decode.add_argument(
        "--representation", choices=[r.value for r in Representation], default=Representation.FULL.value
    )
    decode.add_argument("--seed", type=int, default=None, help="classifier seed (default: run seed)")

    probe = commands.add_parser("probe", parents=[common], help="reconstruction and code-assignment probes")
    probe.add_argument("--checkpoint", default=None)

    report = commands.add_parser("report", parents=[common], help="disentanglement report over train.seeds")
    report.add_argument("--checkpoint", default=None)
    report.add_argument(
        "--nus",
        nargs="?",
        const=",".join(f"{nu:g}" for nu in DEFAULT_NUS),
        default=None,
        help="comma-separated partition factors to sweep (bare flag: 0.25,0.5,0.75,1)",
    )
    report.add_argument("--paradigms", action="store_true", help="also compare h2d, upant and heterogeneous")

    export = commands.add_parser("export-codes", parents=[common], help="export code embeddings as CSV")
    export.add_argument("--checkpoint", default=None)
    export.add_argument("--dest", default=None, help="output directory (default out_dir/embeddings)")

    sweep = commands.add_parser("sweep", parents=[common], help="re-run both stages over one config key")
    sweep.add_argument("--key", required=True, help="dotted config key, e.g. h2d.code_dim")
    sweep.add_argument("--values", required=True, help="comma-separated values")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    if args.config is None:
        parser.print_usage(sys.stderr)
        print(f"h2dilr {args.command}: error: --config is required", file=sys.stderr)
        return EXIT_INVALID

    configure_logging(args.log_level)
    try:
        config = load_run_config(args.config, args.overrides)
        write_echo(config, Path(config.out_dir))
        HANDLERS[args.command](config, args)
    except (ValueError, ValidationError) as exc:
        logger.error("%s: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_FAILED
    return EXIT_OK


def main() -> None:
    """Console entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()

"""
Command-line entry point
Multimodal normative modeling pipeline
"""
import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from mmnorm.api import evaluate, interpret, score, synth, train
from mmnorm.config import settings
from mmnorm.utils.errors import DataValidationError, PipelineError, UsageError
from mmnorm.utils.log import setup_logging

logger = logging.getLogger(__name__)

COMMANDS = (synth, train, score, evaluate, interpret)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; raise instead so the exit code is mapped in one place"""

    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=settings.APP_NAME, description="Multimodal normative modeling pipeline")
    parser.add_argument("--version", action="version", version=f"{settings.APP_NAME} {settings.VERSION}")
    parser.add_argument("--log-level", help="overrides MMNORM_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    # Include commands
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns 0 ok, 2 usage, 3 validation, 4 numeric"""
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.log_level)
        return args.func(args)
    except ValidationError as exc:
        error = DataValidationError("invalid configuration", errors=exc.errors(include_url=False))
        logger.error("%s", error)
        return error.exit_code
    except PipelineError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

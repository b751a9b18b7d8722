"""
Command-line entry point - python -m bnprune.main <train|prune|finetune|eval|inspect>
"""
from typing import List, Optional
from pathlib import Path
import argparse
import logging
import sys

from bnprune.commands import COMMANDS
from bnprune.config import load_run_config, settings
from bnprune.exceptions import BnPruneError, ConfigError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1


class _ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as exit code 1"""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="bnprune",
        description="Train with ISTA on batch-norm scales, prune constant channels, fine-tune",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="Run configuration (JSON)")
    parser.add_argument("--checkpoint", type=Path, help="Input checkpoint")
    parser.add_argument("--out", type=Path, help="Output directory (default: config out_dir, else '.')")
    parser.add_argument("--seed", type=int, help="Overrides the configured seed")
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted config override, e.g. ista.rho=0.002 (repeatable)",
    )
    return parser


def configure_logging() -> None:
    level = logging.DEBUG if settings.DEBUG else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def run(argv: Optional[List[str]] = None) -> int:
    """Parse, run one command, map failures to exit codes"""
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.override)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        config = load_run_config(args.config, overrides)
        out_dir = args.out or Path(config.out_dir or ".")

        logger.info(f"Running {args.command} (seed {config.seed}) -> {out_dir}")
        result = COMMANDS[args.command](config, args.checkpoint, out_dir)
        for key, value in result.items():
            if key != "text":
                logger.info(f"{key}: {value}")
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return e.exit_code
    except BnPruneError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=settings.DEBUG)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}", exc_info=True)
        return 3


def main() -> None:
    configure_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()

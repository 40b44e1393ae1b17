import argparse
import os
import sys
from typing import Optional, Sequence

from dotenv import load_dotenv
from loguru import logger

from .config import EXPERIMENTS, load_config
from .errors import ConfigError, NumericalError, ReplayMismatchError
from .experiments import ExperimentRunner, replay

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_REPLAY = 4


def resolve_threads(flag: Optional[int]) -> int:
    """--threads wins over MVSCALE_THREADS, which wins over 1."""
    if flag is not None:
        value = flag
    else:
        raw = os.environ.get("MVSCALE_THREADS", "").strip()
        if not raw:
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"MVSCALE_THREADS must be an integer, got '{raw}'") from None
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def _configure_logging(verbose: bool) -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO")


def _run(args: argparse.Namespace) -> int:
    threads = resolve_threads(args.threads)
    if args.experiment == "replay":
        if not args.summary:
            raise ConfigError("replay needs the path of a summary.json")
        checked = replay(args.summary, threads if args.threads is not None else None)
        logger.info("replay passed: {}", ", ".join(checked) or "no artefacts")
        return EXIT_OK

    if not args.config:
        raise ConfigError("--config is required")
    config = load_config(args.config)
    if config.experiment != args.experiment:
        raise ConfigError(f"config describes '{config.experiment}', command line asked for '{args.experiment}'")
    if args.seed_override is not None:
        if not 0 <= args.seed_override < 2**64:
            raise ConfigError("--seed-override must be an unsigned 64-bit integer")
        config = config.with_seed(args.seed_override)
    summary = ExperimentRunner(config, args.out, threads).run()
    logger.info("headline: {}", summary.headline)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = argparse.ArgumentParser(prog="mvscale", description="Run a two-time-scale mean-field experiment")
    parser.add_argument("experiment", choices=[*EXPERIMENTS, "replay"], help="Experiment kind, or 'replay'")
    parser.add_argument("summary", nargs="?", help="summary.json to replay (replay only)")
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--out", help="Directory for artefacts (overrides output_dir of the config)")
    parser.add_argument("--seed-override", type=int, help="Replace the config seed")
    parser.add_argument("--threads", type=int, help="Worker threads (default: MVSCALE_THREADS or 1)")
    parser.add_argument("--verbose", action="store_true", help="Log solver internals")
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)

    try:
        return _run(args)
    except ReplayMismatchError as err:
        logger.error("replay mismatch: {}", err)
        return EXIT_REPLAY
    except ConfigError as err:
        logger.error("invalid configuration: {}", err)
        return EXIT_CONFIG
    except NumericalError as err:
        logger.error("numerical failure: {}", err)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

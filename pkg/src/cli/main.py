"""Command-line front end: `esmlr emaps|experiment|sweep --config <path> [--field value ...]`."""

import argparse
import logging
import sys
from typing import Dict, List, Optional

from dotenv import load_dotenv
import numpy as np

from src.cli.experiment_runner import ExperimentRunner
from src.models.config import FIELDS, SweepSpec, load_config_from_yaml, parse_override
from src.utils.custom_logger import LoggerSetup
from src.utils.errors import ConfigError, EsmlrError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='esmlr', description=__doc__)
    sub = parser.add_subparsers(dest='command', required=True)

    for name, text in (('emaps', 'extract and dump EMAP features'),
                       ('experiment', 'run a multi-trial classification experiment'),
                       ('sweep', 'repeat the experiment over one parameter axis')):
        cmd = sub.add_parser(name, help=text, allow_abbrev=False)
        cmd.add_argument('--config', required=True, help='JSON (or YAML) experiment document')
        cmd.add_argument('--verbose', action='store_true', help='debug logging')
        overrides = cmd.add_argument_group('config overrides')
        for field in FIELDS:
            overrides.add_argument(f'--{field}', dest=f'override_{field}', default=None, metavar='VALUE')
        if name == 'sweep':
            cmd.add_argument('--axis', required=True, choices=SweepSpec.AXES)
            cmd.add_argument('--values', default=None,
                             help='comma-separated or [list]; defaults to the standard grid for the axis')
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, object]:
    overrides = {}
    for field in FIELDS:
        raw = getattr(args, f'override_{field}')
        if raw is not None:
            overrides[field] = parse_override(raw)
    return overrides


def parse_values(raw: Optional[str]) -> Optional[List[float]]:
    if raw is None:
        return None
    value = parse_override(raw if raw.strip().startswith('[') else f'[{raw}]')
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
        raise ConfigError(f"--values must be a list of numbers, got {raw!r}")
    return value


def run(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO

    LoggerSetup.reset('esmlr')
    logger = LoggerSetup.setup_logger('esmlr', level=level)

    config = load_config_from_yaml(args.config, collect_overrides(args),
                                   require_ground_truth=args.command != 'emaps')
    if not config:
        logger.error(f"Failed to load configuration from {args.config}")
        return EXIT_CONFIG

    if config.log_file:
        LoggerSetup.reset('esmlr')
        logger = LoggerSetup.setup_logger('esmlr', config.log_file, level)

    runner = ExperimentRunner(config, logging.getLogger('esmlr.runner'))
    try:
        if args.command == 'emaps':
            path = runner.cmd_emaps()
            logger.info(f"EMAP features written to {path}")
        elif args.command == 'experiment':
            runner.cmd_experiment()
            logger.info(f"Experiment outputs written to {config.output_dir}")
        else:
            sweep = SweepSpec(args.axis, parse_values(args.values))
            runner.cmd_sweep(sweep)
            logger.info(f"Sweep over {sweep.axis} written to {config.output_dir}")
    except EsmlrError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return EXIT_DATA
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

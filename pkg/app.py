import argparse
import logging

from config import LOG_LEVEL, VERSION, WORKDIR
from models import ConfigError, WorldModelError

from commands import data_commands, eval_commands, plan_commands, rollout_commands, table_commands, train_commands

logger = logging.getLogger(__name__)

COMMAND_MODULES = [
    data_commands,
    train_commands,
    table_commands,
    eval_commands,
    rollout_commands,
    plan_commands,
]

EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_USAGE_ERROR = 2


def configure_logging(verbose=False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog='stn-world-model',
        description='Action-conditioned world model with spatial transformers and CEM planning',
    )
    parser.add_argument('--workdir', default=WORKDIR, help='Base directory for relative paths')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    parser.add_argument('--version', action='version', version=f'%(prog)s {VERSION}')
    subparsers = parser.add_subparsers(dest='command', required=True)

    # Register command groups
    for module in COMMAND_MODULES:
        module.register(subparsers)
    return parser


def main(argv=None):
    """
    Run one subcommand

    Returns:
        int: 0 on success, 2 on usage error, 1 on runtime error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE_ERROR

    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {str(e)}")
        parser.print_usage()
        return EXIT_USAGE_ERROR
    except WorldModelError as e:
        logger.error(f"Error running {args.command}: {str(e)}")
        return EXIT_RUNTIME_ERROR
    except OSError as e:
        logger.error(f"I/O error running {args.command}: {str(e)}")
        return EXIT_RUNTIME_ERROR
    except Exception as e:
        logger.exception(f"Unexpected error running {args.command}: {str(e)}")
        return EXIT_RUNTIME_ERROR

# External module dependencies
from dataclasses import replace
from pathlib import Path
import logging

# Internal module dependencies
from .errors import ConfigError
from .config import RunConfig, parse_config, validate
from . import api
from . import log

###############################################################################
# Defaults
###############################################################################
def default_log_path(dir_path : Path = Path('./')) -> Path:
    return Path(dir_path, 'mamrl.log')

###############################################################################
# Functions
###############################################################################
def apply_flags(config : RunConfig, args) -> RunConfig:
    """The dedicated flags take precedence over the file and any --set.
    Their values are assigned as given, not read as YAML."""
    if args.seed is not None: config = replace(config, seeds = [args.seed])
    if args.out is not None: config = replace(config, out = args.out)
    if args.model is not None:
        config = replace(config, model = replace(config.model, architecture = args.model))
    validate(config)
    return config

def load_config(args, cwd : Path) -> RunConfig:
    config_path = None
    if args.config is not None:
        config_path = Path(cwd, args.config)
    elif api.default_config_path(cwd).exists():
        config_path = api.default_config_path(cwd)
    config = apply_flags(parse_config(config_path, args.overrides), args)
    if not Path(config.out).is_absolute():
        config.out = str(Path(cwd, config.out))
    return config

###############################################################################
# Main entry
###############################################################################
def main():
    import argparse
    import sys

    def _app(args : argparse.Namespace) -> bool:
        cwd = Path.cwd()

        # Check if in version mode
        if args.mode == 'version':
            from . import __version__
            print(__version__)
            return True

        # Handle logging
        logging.basicConfig(
            filename = Path(cwd, args.log),
            encoding = 'utf-8',
            level = 'DEBUG' if args.debug else 'INFO',
            format = '%(asctime)s | %(levelname)s | %(message)s'
        )

        # Resolve configuration
        try: config = load_config(args, cwd)
        except ConfigError as error:
            log.critical(str(error))
            return False

        # Run specified mode
        if args.mode == 'train':
            return api.train(config, args.workers)
        if args.mode == 'eval':
            if args.checkpoint is None:
                log.critical('Mode eval requires --checkpoint')
                return False
            return api.evaluate(config, Path(cwd, args.checkpoint), args.workers)
        if args.mode == 'bench':
            return api.bench(config)
        if args.mode == 'verify':
            return api.verify(config, args.workers)

        raise RuntimeError('Unknown mode \"%s\"' % args.mode)

    parser = argparse.ArgumentParser(
        prog = 'mamrl',
        description = 'Selective state space sequence models for multi-agent reinforcement learning.',
        formatter_class = argparse.ArgumentDefaultsHelpFormatter
    )
    parser.add_argument(
        'mode', type = str,
        choices = ['train', 'eval', 'bench', 'verify', 'version'],
        help = 'Train mode trains a policy on the configured game and writes metrics and checkpoints per seed. Eval mode runs greedy episodes with a stored checkpoint. Bench mode times autoregressive decoding against the number of agents. Verify mode runs the numerical and behavioural check suites. Version mode will print the tool version.'
    )
    parser.add_argument(
        '--debug',
        dest = 'debug',
        action = 'store_true',
        help = 'Sets debug logging level for tool messages'
    )
    parser.add_argument(
        '-w', '--workers',
        type = int,
        dest = 'workers',
        default = api.default_worker_count(),
        help = 'The number of concurrent workers; defaults to the number of logical cores minus one for the main thread'
    )
    parser.add_argument(
        '-c', '--config',
        type = str,
        dest = 'config',
        default = None,
        help = 'Config YAML file location; defaults to mamrl.yaml when present, file path must be relative to current working directory'
    )
    parser.add_argument(
        '--set',
        type = str,
        dest = 'overrides',
        action = 'append',
        default = [],
        metavar = 'KEY=VALUE',
        help = 'Overrides a config value by its dotted key, e.g. train.updates=50; may be repeated'
    )
    parser.add_argument(
        '--seed',
        type = int,
        dest = 'seed',
        default = None,
        help = 'Runs with this single seed instead of the configured seed list'
    )
    parser.add_argument(
        '--out',
        type = str,
        dest = 'out',
        default = None,
        help = 'Output directory for metrics, checkpoints and reports'
    )
    parser.add_argument(
        '--model',
        type = str,
        dest = 'model',
        choices = ['mam', 'attention', 'mappo'],
        default = None,
        help = 'Selects the policy architecture; mappo is the independent-policy baseline'
    )
    parser.add_argument(
        '--checkpoint',
        type = str,
        dest = 'checkpoint',
        default = None,
        help = 'Checkpoint file to evaluate in eval mode'
    )
    parser.add_argument(
        '-l', '--log',
        type = str,
        dest = 'log',
        default = default_log_path(),
        help = 'Log file location; contains runtime messages, file path must be relative to current working directory'
    )
    success = _app(parser.parse_args())
    sys.exit(0 if success else -1)

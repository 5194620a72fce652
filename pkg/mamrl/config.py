# External module dependencies
from dataclasses import dataclass, field, fields
from typing import Any, Optional, Sequence, List, Dict
from pathlib import Path
import yaml

# Internal module dependencies
from .errors import ConfigError
from . import dataspec

###############################################################################
# Datatypes
###############################################################################
ARCHITECTURES = ('mam', 'attention', 'mappo')
GAMES = ('consensus', 'foraging')
FAULTS = ('', 'zoh_scan')

@dataclass
class ModelConfig:
    architecture : str = 'mam'
    embed_dim : int = 128
    hidden_dim : int = 32
    delta_rank : int = 128
    conv_width : int = 4
    n_blocks : int = 1
    n_heads : int = 1
    n_attention_blocks : int = 3
    n_agents : int = 3
    obs_dim : int = 7
    n_actions : int = 4
    variant : str = 'euler'
    scan_method : str = 'sequential'
    permute_agents : bool = False

@dataclass
class TrainConfig:
    gamma : float = 0.99
    gae_lambda : float = 0.9
    clip_eps : float = 0.1
    entropy_coef : float = 0.01
    value_coef : float = 0.5
    rollout_length : int = 128
    epochs : int = 10
    minibatches : int = 2
    learning_rate : float = 0.0005
    max_grad_norm : float = 0.5
    normalize_advantage : bool = False
    updates : int = 200
    eval_interval : int = 10
    eval_episodes : int = 32

@dataclass
class EnvConfig:
    name : str = 'consensus'
    n_agents : int = 3
    n_actions : int = 4
    horizon : int = 16
    grid_size : int = 5
    n_food : int = 2
    max_level : int = 2

@dataclass
class BenchConfig:
    agents : List[int] = field(default_factory = lambda: [8, 16, 32, 64, 128, 256])
    models : List[str] = field(default_factory = lambda: ['mam', 'attention', 'mappo'])
    repetitions : int = 20
    warmup : int = 2
    embed_dim : int = 128
    n_actions : int = 4
    dtype : str = 'float32'
    min_seconds : float = 0.001

@dataclass
class VerifyConfig:
    draws : int = 50
    fault : str = ''
    suites : List[str] = field(default_factory = list)

@dataclass
class RunConfig:
    model : ModelConfig = field(default_factory = ModelConfig)
    train : TrainConfig = field(default_factory = TrainConfig)
    env : EnvConfig = field(default_factory = EnvConfig)
    bench : BenchConfig = field(default_factory = BenchConfig)
    verify : VerifyConfig = field(default_factory = VerifyConfig)
    seeds : List[int] = field(default_factory = lambda: [0])
    out : str = 'out'

###############################################################################
# Functions
###############################################################################
def _assign(tree : Dict[str, Any], key : str, value : Any):
    parts = key.split('.')
    for part in parts[:-1]:
        if part not in tree or tree[part] is None: tree[part] = dict()
        if not isinstance(tree[part], dict):
            raise ConfigError('Key %s is not a section' % key)
        tree = tree[part]
    tree[parts[-1]] = value

def flatten(raw : Any) -> Dict[str, Any]:
    """Fold dotted keys into nested sections: {'model.hidden_dim': 16}
    and {'model': {'hidden_dim': 16}} give the same tree."""
    if raw is None: return dict()
    if not isinstance(raw, dict):
        raise ConfigError('Expected a mapping at the top of the config file')
    result : Dict[str, Any] = dict()
    def _walk(prefix : str, value : Any):
        if isinstance(value, dict) and len(value) != 0:
            for key, item in value.items():
                if not isinstance(key, str):
                    raise ConfigError('Expected string keys, got %s' % key)
                _walk(key if prefix == '' else '%s.%s' % (prefix, key), item)
            return
        _assign(result, prefix, value)
    _walk('', raw)
    return result

def parse_override(override : str) -> Dict[str, Any]:
    if '=' not in override:
        raise ConfigError('Expected key=value but got \"%s\"' % override)
    key, text = override.split('=', 1)
    key = key.strip()
    if key == '': raise ConfigError('Empty key in override \"%s\"' % override)
    try: value = yaml.safe_load(text)
    except yaml.YAMLError:
        raise ConfigError('Could not parse value of override %s' % key)
    return { key : value }

def parse_config(
    config_path : Optional[Path] = None,
    overrides : Sequence[str] = ()
    ) -> RunConfig:
    raw : Dict[str, Any] = dict()
    if config_path is not None:
        if not config_path.exists():
            raise ConfigError('Config file %s does not exist' % config_path)
        with config_path.open('r') as config_file:
            try: raw = flatten(yaml.safe_load(config_file))
            except yaml.YAMLError as error:
                raise ConfigError('Malformed config file %s: %s' % (
                    config_path, error
                ))
    for override in overrides:
        for key, value in parse_override(override).items():
            _assign(raw, key, value)
    config = dataspec.decode(RunConfig, raw)
    validate(config)
    return config

def validate(config : RunConfig):
    def _positive(section : Any, prefix : str, exclude : Sequence[str] = ()):
        for item in fields(section):
            if item.name in exclude: continue
            value = getattr(section, item.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                continue
            if value > 0: continue
            raise ConfigError('%s.%s must be positive, got %s' % (
                prefix, item.name, value
            ))

    def _choice(value : str, choices : Sequence[str], key : str):
        if value in choices: return
        raise ConfigError('%s must be one of %s, got \"%s\"' % (
            key, ', '.join(repr(choice) for choice in choices), value
        ))

    _positive(config.model, 'model')
    _choice(config.model.architecture, ARCHITECTURES, 'model.architecture')
    _choice(config.model.variant, ('euler', 'zoh'), 'model.variant')
    _choice(config.model.scan_method, ('sequential', 'parallel'), 'model.scan_method')
    if config.model.embed_dim % config.model.n_heads != 0:
        raise ConfigError('model.n_heads must divide model.embed_dim')

    _positive(config.train, 'train', ('entropy_coef', 'gamma', 'gae_lambda'))
    if not 0.0 <= config.train.gamma < 1.0:
        raise ConfigError('train.gamma must lie in [0, 1), got %s' % config.train.gamma)
    if not 0.0 <= config.train.gae_lambda <= 1.0:
        raise ConfigError('train.gae_lambda must lie in [0, 1]')
    if config.train.entropy_coef < 0:
        raise ConfigError('train.entropy_coef must be non-negative')
    if config.train.minibatches > config.train.rollout_length:
        raise ConfigError('train.minibatches exceeds train.rollout_length')

    _positive(config.env, 'env')
    _choice(config.env.name, GAMES, 'env.name')

    _positive(config.bench, 'bench', ('warmup',))
    if config.bench.warmup < 0: raise ConfigError('bench.warmup must be non-negative')
    if len(config.bench.agents) == 0 or min(config.bench.agents) < 1:
        raise ConfigError('bench.agents must list positive agent counts')
    config.bench.agents = sorted(set(config.bench.agents))
    for index, model in enumerate(config.bench.models):
        _choice(model, ARCHITECTURES, 'bench.models.%d' % index)
    _choice(config.bench.dtype, ('float32', 'float64'), 'bench.dtype')

    _positive(config.verify, 'verify')
    _choice(config.verify.fault, FAULTS, 'verify.fault')

    if len(config.seeds) == 0: raise ConfigError('seeds must not be empty')

def snapshot(config : RunConfig) -> str:
    return yaml.safe_dump(
        dataspec.encode(RunConfig, config),
        sort_keys = True,
        default_flow_style = False
    )

def load_snapshot(text : str) -> RunConfig:
    config = dataspec.decode(RunConfig, yaml.safe_load(text))
    validate(config)
    return config

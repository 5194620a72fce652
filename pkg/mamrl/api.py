# External module dependencies
from dataclasses import replace
from multiprocessing import cpu_count
from typing import Optional
from pathlib import Path
import time
import numpy as np
import yaml

# Internal module dependencies
from .bench import run_bench
from .checkpoint import save_checkpoint, load_checkpoint
from .config import ModelConfig, RunConfig
from .errors import MamrlError, NonFiniteError
from .evaluate import JobError, Pool
from .games import MarkovGame, make_game
from .metrics import (
    SCHEMA_VERSION,
    MetricsRow,
    BenchRow,
    SlopeRow,
    CsvLog,
    write_rows
)
from .model import Params, init_model, parameter_count
from .ppo import Adam, collect_rollout, ppo_update, evaluate_policy
from .verify import run_verify, store_report
from . import numerics as nx
from . import log

###############################################################################
# Defaults
###############################################################################
EVAL_SEED_OFFSET = 1_000_000

def default_worker_count() -> int:
    return max(1, cpu_count() - 1)

def default_config_path(dir_path : Path = Path('./')) -> Path:
    return Path(dir_path, 'mamrl.yaml')

def seed_dir(out_path : Path, seed : int) -> Path:
    return Path(out_path, 'seed_%d' % seed)

###############################################################################
# Helpers
###############################################################################
def resolve_model(config : RunConfig, game : MarkovGame) -> RunConfig:
    """Run config whose model section matches the game's agent count,
    observation size and action count."""
    model : ModelConfig = replace(config.model,
        n_agents = game.n_agents,
        obs_dim = game.obs_dim,
        n_actions = game.n_actions
    )
    return replace(config, model = model)

def _copy(params : Params) -> Params:
    return nx.map_parameters(params, lambda _, value: value.copy())

def _store_diagnostics(path : Path, seed : int, update : int, error : NonFiniteError):
    with path.open('w+') as diagnostics_file:
        yaml.safe_dump({
            'seed' : seed,
            'update' : update,
            'error' : str(error),
            'last_good' : 'last_good.ckpt'
        }, diagnostics_file, sort_keys = False, default_flow_style = False)

###############################################################################
# Training
###############################################################################
def train_seed(config : RunConfig, seed : int, pool : Pool, out_path : Path) -> Params:
    """Train one model on the configured game. Writes metrics.csv and
    final.ckpt into out_path; a non-finite value aborts training after
    last_good.ckpt and diagnostics.yaml have been written."""
    game = make_game(config.env)
    config = resolve_model(config, game)
    cfg = config.train
    params = init_model(config.model, seed)
    optimizer = Adam(params, cfg.learning_rate)
    rng = np.random.default_rng(seed)
    metrics = CsvLog(Path(out_path, 'metrics.csv'), MetricsRow)
    log.info('Training %s (%d parameters) on %s with seed %d' % (
        config.model.architecture, parameter_count(params), config.env.name, seed
    ))

    start = time.perf_counter()
    last_good = _copy(params)
    for update in range(1, cfg.updates + 1):
        try:
            batch = collect_rollout(
                game, config.model, params, cfg,
                int(rng.integers(0, 2 ** 31 - 1))
            )
            stats = ppo_update(config.model, params, batch, optimizer, cfg, rng)
        except NonFiniteError as error:
            save_checkpoint(last_good, config, Path(out_path, 'last_good.ckpt'))
            _store_diagnostics(Path(out_path, 'diagnostics.yaml'), seed, update, error)
            raise
        last_good = _copy(params)
        if update % cfg.eval_interval != 0 and update != cfg.updates: continue

        result = evaluate_policy(
            game, config.model, params, cfg.eval_episodes,
            EVAL_SEED_OFFSET + seed * cfg.eval_episodes, pool
        )
        metrics.append(MetricsRow(
            schema_version = SCHEMA_VERSION,
            update = update,
            env_steps = update * cfg.rollout_length,
            return_mean = result.mean,
            return_ci_low = result.ci_low,
            return_ci_high = result.ci_high,
            policy_loss = stats.policy_loss,
            value_loss = stats.value_loss,
            entropy = stats.entropy,
            approx_kl = stats.approx_kl,
            clip_fraction = stats.clip_fraction,
            wall_clock = time.perf_counter() - start
        ))
        log.info('Update %d: return %.3f [%.3f, %.3f] of optimum %.3f' % (
            update, result.mean, result.ci_low, result.ci_high, game.optimal_return
        ))

    save_checkpoint(params, config, Path(out_path, 'final.ckpt'))
    return params

def train(config : RunConfig, worker_count : int = default_worker_count()) -> bool:
    pool = Pool(worker_count)
    try:
        for seed in config.seeds:
            train_seed(config, seed, pool, seed_dir(Path(config.out), seed))
    except NonFiniteError as error:
        log.critical('Training aborted: %s' % error)
        return False
    except JobError as error:
        log.critical('Job \"%s\" failed with message:\n%s' % (
            error.description, error.message
        ))
        return False
    except MamrlError as error:
        log.critical(str(error))
        return False
    return True

###############################################################################
# Evaluation
###############################################################################
def evaluate(
    config : RunConfig,
    checkpoint_path : Path,
    worker_count : int = default_worker_count()
    ) -> bool:
    """Greedy evaluation of a stored model on the game it was trained on;
    the result is written to eval.yaml."""
    if not checkpoint_path.exists():
        log.critical('Checkpoint file not found: %s' % checkpoint_path)
        return False
    try:
        params, stored = load_checkpoint(checkpoint_path)
        game = make_game(stored.env)
        seed = config.seeds[0]
        result = evaluate_policy(
            game, stored.model, params, config.train.eval_episodes,
            EVAL_SEED_OFFSET + seed * config.train.eval_episodes,
            Pool(worker_count)
        )
    except JobError as error:
        log.critical('Job \"%s\" failed with message:\n%s' % (
            error.description, error.message
        ))
        return False
    except MamrlError as error:
        log.critical(str(error))
        return False

    log.info('Return %.3f [%.3f, %.3f] over %d episodes' % (
        result.mean, result.ci_low, result.ci_high, len(result.returns)
    ))
    out_path = Path(config.out)
    out_path.mkdir(parents = True, exist_ok = True)
    with Path(out_path, 'eval.yaml').open('w+') as eval_file:
        yaml.safe_dump({
            'checkpoint' : str(checkpoint_path),
            'mean' : float(result.mean),
            'ci_low' : float(result.ci_low),
            'ci_high' : float(result.ci_high),
            'optimal_return' : float(game.optimal_return),
            'returns' : [ float(value) for value in result.returns ]
        }, eval_file, sort_keys = False, default_flow_style = False)
    return True

###############################################################################
# Benchmark
###############################################################################
def bench(config : RunConfig) -> bool:
    try: rows, slopes = run_bench(config.bench, config.model, config.seeds[0])
    except MamrlError as error:
        log.critical(str(error))
        return False
    out_path = Path(config.out)
    write_rows(Path(out_path, 'bench.csv'), BenchRow, rows)
    write_rows(Path(out_path, 'bench_slopes.csv'), SlopeRow, slopes)
    return True

###############################################################################
# Verification
###############################################################################
def verify(
    config : RunConfig,
    worker_count : int = default_worker_count(),
    report_path : Optional[Path] = None
    ) -> bool:
    if report_path is None: report_path = Path(config.out, 'verify.yaml')
    try: results = run_verify(config.verify, config.seeds[0], Pool(worker_count))
    except JobError as error:
        log.critical('Suite \"%s\" failed with message:\n%s' % (
            error.description, error.message
        ))
        return False
    except MamrlError as error:
        log.critical(str(error))
        return False
    store_report(report_path, config.verify, results)
    failed = [ result.suite for result in results if not result.passed ]
    if len(failed) != 0:
        log.error('Failed suites: %s' % ', '.join(failed))
        return False
    log.info('All %d suites passed' % len(results))
    return True

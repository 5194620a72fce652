# External module dependencies
from dataclasses import dataclass, replace
from typing import Callable, Tuple, List
import time
import numpy as np

# Internal module dependencies
from .config import BenchConfig, ModelConfig
from .games import ConsensusGame
from .metrics import SCHEMA_VERSION, BenchRow, SlopeRow
from .model import Params, cast, init_model, encode_forward, decode_autoregressive
from .numerics import Array
from . import log

###############################################################################
# Datatypes
###############################################################################
GROUP_SIZE = 5

@dataclass
class Timing:
    mean_seconds : float
    std_seconds : float
    repetitions : int
    inner : int

###############################################################################
# Functions
###############################################################################
def median_of_means(samples : Array, group_size : int = GROUP_SIZE) -> float:
    samples = np.asarray(samples, dtype = np.float64)
    groups = max(1, len(samples) // group_size)
    return float(np.median([ group.mean() for group in np.array_split(samples, groups) ]))

def time_call(
    work : Callable[[], None],
    repetitions : int,
    warmup : int,
    min_seconds : float
    ) -> Timing:
    """Seconds per call. Calls are batched into inner loops long enough
    to stay above the timer resolution floor min_seconds."""
    for _ in range(warmup): work()

    def _measure(inner : int) -> float:
        start = time.perf_counter()
        for _ in range(inner): work()
        return time.perf_counter() - start

    inner = 1
    while _measure(inner) < min_seconds: inner *= 2
    samples = np.array([ _measure(inner) / inner for _ in range(repetitions) ])
    return Timing(
        mean_seconds = median_of_means(samples),
        std_seconds = float(samples.std()),
        repetitions = repetitions,
        inner = inner
    )

def decode_step(
    config : ModelConfig,
    params : Params,
    obs : Array
    ) -> Callable[[], None]:
    def _work():
        encoded, _ = encode_forward(params, obs, config.variant, config.scan_method)
        decode_autoregressive(
            params, encoded, 'greedy',
            variant = config.variant, method = config.scan_method
        )
    return _work

def fit_slope(agents : List[int], seconds : List[float]) -> float:
    if len(agents) < 2: return float('nan')
    return float(np.polyfit(np.log(agents), np.log(seconds), 1)[0])

def run_bench(
    bench : BenchConfig,
    model : ModelConfig,
    seed : int
    ) -> Tuple[List[BenchRow], List[SlopeRow]]:
    """Time one full joint-action decode (encoder pass plus agent-by-agent
    decoding) per agent count and model, and fit log(time) against
    log(agents)."""
    dtype = np.dtype(bench.dtype)
    rows : List[BenchRow] = list()
    slopes : List[SlopeRow] = list()
    for architecture in bench.models:
        seconds : List[float] = list()
        for n_agents in bench.agents:
            game = ConsensusGame(n_agents, bench.n_actions, 1)
            _, obs = game.reset(seed)
            config = replace(model,
                architecture = architecture,
                embed_dim = bench.embed_dim,
                n_agents = n_agents,
                obs_dim = game.obs_dim,
                n_actions = bench.n_actions
            )
            params = cast(init_model(config, seed), dtype)
            timing = time_call(
                decode_step(config, params, obs.astype(dtype)),
                bench.repetitions, bench.warmup, bench.min_seconds
            )
            log.info('%s n=%d: %.6f s per decode (std %.6f, inner %d)' % (
                architecture, n_agents, timing.mean_seconds,
                timing.std_seconds, timing.inner
            ))
            seconds.append(timing.mean_seconds)
            rows.append(BenchRow(
                schema_version = SCHEMA_VERSION,
                model = architecture,
                n_agents = n_agents,
                mean_seconds = timing.mean_seconds,
                std_seconds = timing.std_seconds,
                repetitions = timing.repetitions,
                inner = timing.inner
            ))
        slope = fit_slope(bench.agents, seconds)
        log.info('%s log-log slope %.3f' % (architecture, slope))
        slopes.append(SlopeRow(
            schema_version = SCHEMA_VERSION,
            model = architecture,
            slope = slope
        ))
    return rows, slopes

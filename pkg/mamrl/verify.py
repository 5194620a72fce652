# External module dependencies
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional, List, Dict
from pathlib import Path
import numpy as np
import yaml

# Internal module dependencies
from .attention import attention_weights, init_attention, mat_backbone
from .blocks import (
    init_block_params,
    init_cross_params,
    mamba_block,
    bimamba_block,
    crossmamba_block
)
from .config import ARCHITECTURES, ModelConfig, TrainConfig, VerifyConfig
from .errors import ConfigError
from .evaluate import Job, Pool
from .model import (
    init_model,
    encode,
    decode_parallel,
    decode_autoregressive,
    evaluate_actions
)
from .numerics import Array, Node, constant, parameter, no_grad, gradient_check
from .ppo import gae, gae_reference, mappo_loss
from .ssm import (
    VARIANTS,
    METHODS,
    SelectiveSsmParams,
    init_ssm_params,
    selective_parameters,
    scan_steps,
    scan_sequential,
    scan_parallel,
    selective_scan,
    implicit_attention_matrix,
    apply_implicit_attention
)
from .tabular import random_tabular_game, random_factorized_policy, decomposition_residuals
from . import numerics as nx
from . import log

###############################################################################
# Datatypes
###############################################################################
@dataclass
class SuiteResult:
    suite : str
    tolerance : float
    worst_error : float = 0.0
    checks : int = 0
    passed : bool = True
    detail : str = ''

    def record(self, error : float):
        self.checks += 1
        self.worst_error = max(self.worst_error, float(error))
        if not error <= self.tolerance: self.passed = False

    def require(self, condition : bool, detail : str):
        self.checks += 1
        if condition: return
        self.passed = False
        if self.detail == '': self.detail = detail

Suite = Callable[[VerifyConfig, int], SuiteResult]

###############################################################################
# Helpers
###############################################################################
def _max_abs(a : Array, b : Array) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0

def _random_ssm(
    rng : np.random.Generator,
    channels : int,
    state_dim : int,
    source_dim : Optional[int] = None
    ) -> SelectiveSsmParams:
    params = init_ssm_params(rng, channels, state_dim, 2, source_dim)
    params.D.value = rng.normal(size = channels)
    params.A_log.value = params.A_log.value + rng.uniform(-0.5, 0.5, size = params.A_log.shape)
    return params

def _small_model(architecture : str, n_agents : int) -> ModelConfig:
    return ModelConfig(
        architecture = architecture,
        embed_dim = 4,
        hidden_dim = 2,
        delta_rank = 2,
        conv_width = 2,
        n_blocks = 1,
        n_heads = 2,
        n_attention_blocks = 1,
        n_agents = n_agents,
        obs_dim = 5,
        n_actions = 3
    )

def _weighted_sum(x : Node, weights : Array) -> Node:
    return nx.sum(x * constant(weights, x.dtype))

###############################################################################
# Suites
###############################################################################
def implicit_attention_suite(cfg : VerifyConfig, seed : int) -> SuiteResult:
    """The differentiable scan (both methods) and the explicit step scan
    against the lower-triangular matrix form, for plain and cross
    (source-driven C) parameters and both discretisations."""
    result = SuiteResult('implicit_attention', 1e-8)
    rng = np.random.default_rng(seed)
    for draw in range(cfg.draws):
        length = int(rng.integers(1, 9))
        state_dim = int(rng.integers(1, 5))
        channels = int(rng.choice([2, 4]))
        cross = draw % 2 == 1
        source_dim = 3 if cross else None
        params = _random_ssm(rng, channels, state_dim, source_dim)
        x = rng.normal(size = (length, channels))
        source = rng.normal(size = (length, 3)) if cross else None
        B, C, delta = selective_parameters(x, params, source)
        inputs = [
            constant(x[None]), constant(delta[None]), constant(params.A()),
            constant(B[None]), constant(C[None]), params.D
        ]
        for variant in VARIANTS:
            scan_variant = 'zoh' if cfg.fault == 'zoh_scan' else variant
            matrix = implicit_attention_matrix(x, params, variant, source)
            expected = apply_implicit_attention(matrix, x, params.D.value)
            with no_grad():
                for method in METHODS:
                    scanned = selective_scan(*inputs, scan_variant, method).value[0]
                    result.record(_max_abs(scanned, expected))
            steps = scan_steps(x, delta, params.A(), B, C, scan_variant)
            result.record(_max_abs(scan_sequential(steps, x, params.D.value), expected))
            result.require(
                np.all(np.triu(np.ones((length, length)), 1)[None] * matrix == 0.0),
                'implicit attention matrix has entries above the diagonal'
            )
    return result

def parallel_scan_suite(cfg : VerifyConfig, seed : int) -> SuiteResult:
    result = SuiteResult('parallel_scan', 1e-10)
    rng = np.random.default_rng(seed)
    for _ in range(2 * cfg.draws):
        length = int(rng.integers(1, 65))
        params = _random_ssm(rng, 3, 2)
        x = rng.normal(size = (length, 3))
        B, C, delta = selective_parameters(x, params)
        steps = scan_steps(x, delta, params.A(), B, C)
        result.record(_max_abs(
            scan_parallel(steps, x, params.D.value),
            scan_sequential(steps, x, params.D.value)
        ))
        with no_grad():
            args = [
                constant(x[None]), constant(delta[None]), constant(params.A()),
                constant(B[None]), constant(C[None]), params.D
            ]
            result.record(_max_abs(
                selective_scan(*args, method = 'parallel').value,
                selective_scan(*args, method = 'sequential').value
            ))
    return result

def gradient_suite(cfg : VerifyConfig, seed : int) -> SuiteResult:
    result = SuiteResult('gradients', 1e-4)
    rng = np.random.default_rng(seed)

    def _check(loss_fn : Callable[[], Node], params : object, inputs : List[Node]):
        nodes = inputs + [ node for _, node in nx.named_parameters(params) ]
        report = gradient_check(loss_fn, nodes, count = 200, seed = seed)
        for sample in report.samples: result.record(sample.error)

    shape = (2, 5, 4)
    weights = rng.normal(size = shape)
    for variant in ('euler', 'zoh'):
        block = init_block_params(rng, 4, 2, 2, 3)
        x = parameter(rng.normal(size = shape))
        _check(lambda: _weighted_sum(mamba_block(x, block, variant), weights), block, [x])
        _check(lambda: _weighted_sum(bimamba_block(x, block, variant), weights), block, [x])
        cross = init_cross_params(rng, 4, 2, 2, 3, 4)
        source = parameter(rng.normal(size = shape))
        _check(
            lambda: _weighted_sum(crossmamba_block(x, source, cross, variant), weights),
            cross, [x, source]
        )

    for architecture in ARCHITECTURES:
        config = _small_model(architecture, 3)
        params = init_model(config, seed)
        obs = rng.normal(size = (4, 3, 5))
        actions = rng.integers(0, 3, size = (4, 3))
        with no_grad(): logp = evaluate_actions(config, params, obs, actions)[0].value
        old_logp = logp + rng.normal(scale = 0.05, size = logp.shape)
        advantages = rng.normal(size = logp.shape)
        returns = rng.normal(size = logp.shape)
        train = TrainConfig(clip_eps = 0.2)

        def _loss() -> Node:
            logp, entropy, values = evaluate_actions(config, params, obs, actions)
            return mappo_loss(logp, old_logp, advantages, values, returns, entropy, train)[0]

        _check(_loss, params, [])
    return result

def causality_suite(cfg : VerifyConfig, seed : int) -> SuiteResult:
    """Decoder outputs for agents before j ignore agent j's action, and a
    cross block's source token j only reaches output j."""
    result = SuiteResult('causality', 0.0)
    rng = np.random.default_rng(seed)
    for model in range(20):
        n = int(rng.integers(2, 9))
        config = _small_model(ARCHITECTURES[model % len(ARCHITECTURES)], n)
        params = init_model(config, seed + model)
        with no_grad():
            encoded, _ = encode(params, rng.normal(size = (n, 5)))
            actions = rng.integers(0, 3, size = n)
            base = decode_parallel(params, encoded, actions).value
            for j in range(n):
                changed = actions.copy()
                changed[j] = (changed[j] + 1) % 3
                logits = decode_parallel(params, encoded, changed).value
                result.record(_max_abs(logits[:j + 1], base[:j + 1]))

        cross = init_cross_params(rng, 4, 2, 2, 2, 4)
        target = constant(rng.normal(size = (n, 4)))
        source = rng.normal(size = (n, 4))
        with no_grad():
            base = crossmamba_block(target, constant(source), cross).value
            for j in range(n):
                changed = source.copy()
                changed[j] += rng.normal(size = 4)
                out = crossmamba_block(target, constant(changed), cross).value
                others = np.arange(n) != j
                result.record(_max_abs(out[others], base[others]))
    return result

def bidirectional_suite(cfg : VerifyConfig, seed : int) -> SuiteResult:
    result = SuiteResult('bidirectional', 1e-10)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        n = int(rng.integers(2, 9))
        block = init_block_params(rng, 4, 2, 2, 2)
        x = rng.normal(size = (n, 4))
        with no_grad():
            forward = bimamba_block(constant(x), block).value
            flipped = bimamba_block(constant(x[::-1].copy()), block).value
            result.record(_max_abs(flipped, forward[::-1]))
            for j in range(n):
                changed = x.copy()
                changed[j] += rng.normal(size = 4)
                out = bimamba_block(constant(changed), block).value
                moved = np.any(out != forward, axis = 1)
                result.require(
                    (j == 0 or np.any(moved[:j])) and (j == n - 1 or np.any(moved[j + 1:])),
                    'bi-directional block ignored token %d on one side' % j
                )
    return result

def attention_suite(cfg : VerifyConfig, seed : int) -> SuiteResult:
    result = SuiteResult('attention', 1e-12)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        n = int(rng.integers(1, 9))
        params = init_attention(rng, 4, 2)
        x = constant(rng.normal(size = (n, 4)))
        with no_grad():
            for mask in ('none', 'causal'):
                weights = attention_weights(x, x, params, mask)
                result.record(_max_abs(weights.sum(axis = -1), 1.0))
                if mask != 'causal': continue
                upper = np.triu(np.ones((n, n), dtype = bool), 1)
                result.record(float(np.abs(weights[..., upper]).max()) if upper.any() else 0.0)
            config = _small_model('attention', n)
            mat = init_model(config, seed)
            embedded = constant(rng.normal(size = (n, 4)))
            for block in mat.encoder:
                for node in [block.attention.W_O, block.feed_forward.out.W, block.feed_forward.out.b]:
                    node.value = np.zeros_like(node.value)
            encoded, _ = mat_backbone(embedded, embedded, mat)
            result.record(_max_abs(encoded.value, embedded.value))
    return result

def teacher_forcing_suite(cfg : VerifyConfig, seed : int) -> SuiteResult:
    """Greedy autoregressive logits against the parallel decoder, and the
    incremental recurrent decoder against prefix recomputation."""
    result = SuiteResult('teacher_forcing', 1e-6)
    rng = np.random.default_rng(seed)
    for n in range(1, 9):
        for architecture in ARCHITECTURES:
            config = _small_model(architecture, n)
            params = init_model(config, seed + n)
            with no_grad():
                encoded, _ = encode(params, rng.normal(size = (2, n, 5)))
                greedy = decode_autoregressive(params, encoded, 'greedy')
                parallel = decode_parallel(params, encoded, greedy.actions).value
                result.record(_max_abs(greedy.logits, parallel))
                if architecture != 'mam': continue
                recompute = decode_autoregressive(params, encoded, 'greedy', incremental = False)
                error = _max_abs(greedy.logits, recompute.logits)
                result.require(error <= 1e-10, 'incremental decode differs by %g' % error)
                result.require(
                    np.array_equal(greedy.actions, recompute.actions),
                    'incremental decode chose different actions'
                )
    return result

def gae_suite(cfg : VerifyConfig, seed : int) -> SuiteResult:
    result = SuiteResult('gae', 1e-12)
    rng = np.random.default_rng(seed)
    for _ in range(cfg.draws):
        length = int(rng.integers(1, 40))
        n = int(rng.integers(1, 4))
        rewards = rng.normal(size = length)
        values = rng.normal(size = (length, n))
        bootstrap = rng.normal(size = n)
        dones = (rng.random(length) < 0.2).astype(np.float64)
        gamma, lam = float(rng.uniform(0.5, 0.999)), float(rng.uniform(0.0, 1.0))
        advantages, returns = gae(rewards, values, bootstrap, gamma, lam, dones)
        expected = gae_reference(rewards, values, bootstrap, gamma, lam, dones)
        result.record(_max_abs(advantages, expected))
        result.record(_max_abs(returns, expected + values))
    return result

def advantage_decomposition_suite(cfg : VerifyConfig, seed : int) -> SuiteResult:
    result = SuiteResult('advantage_decomposition', 1e-10)
    rng = np.random.default_rng(seed)
    for index in range(max(20, cfg.draws // 2)):
        n_agents = 1 + index % 3
        game = random_tabular_game(
            rng, n_agents,
            int(rng.integers(2, 5)),
            1 if index % 4 == 0 else int(rng.integers(2, 21))
        )
        policy = random_factorized_policy(rng, game)
        for residual in decomposition_residuals(game, policy): result.record(residual)
    return result

SUITES : Dict[str, Suite] = {
    'implicit_attention' : implicit_attention_suite,
    'parallel_scan' : parallel_scan_suite,
    'gradients' : gradient_suite,
    'causality' : causality_suite,
    'bidirectional' : bidirectional_suite,
    'attention' : attention_suite,
    'teacher_forcing' : teacher_forcing_suite,
    'gae' : gae_suite,
    'advantage_decomposition' : advantage_decomposition_suite
}

###############################################################################
# Runner
###############################################################################
def _run_suite(name : str, cfg : VerifyConfig, seed : int) -> SuiteResult:
    result = SUITES[name](cfg, seed)
    log.info('%s: %s (worst error %.3g, tolerance %.3g, %d checks)' % (
        name, 'pass' if result.passed else 'FAIL',
        result.worst_error, result.tolerance, result.checks
    ))
    return result

def run_verify(cfg : VerifyConfig, seed : int, pool : Pool) -> List[SuiteResult]:
    names = list(SUITES.keys()) if len(cfg.suites) == 0 else cfg.suites
    for name in names:
        if name in SUITES: continue
        raise ConfigError('Unknown verification suite \"%s\" at verify.suites' % name)
    return pool.run([
        Job(name, partial(_run_suite, name, cfg, seed))
        for name in names
    ])

def store_report(report_path : Path, cfg : VerifyConfig, results : List[SuiteResult]):
    report_path.parent.mkdir(parents = True, exist_ok = True)
    with report_path.open('w+') as report_file:
        yaml.safe_dump({
            'fault' : cfg.fault,
            'passed' : all(result.passed for result in results),
            'suites' : [
                {
                    'suite' : result.suite,
                    'tolerance' : result.tolerance,
                    'worst_error' : result.worst_error,
                    'checks' : result.checks,
                    'outcome' : 'pass' if result.passed else 'fail',
                    'detail' : result.detail
                }
                for result in results
            ]
        }, report_file, sort_keys = False, default_flow_style = False)

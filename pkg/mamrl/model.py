# External module dependencies
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, List, Union
import numpy as np

# Internal module dependencies
from .attention import (
    MatParams,
    init_mat,
    mat_encode,
    mat_encode_array,
    mat_decode_parallel,
    mat_decode_autoregressive
)
from .blocks import (
    MambaBlockParams,
    CrossMambaParams,
    init_block_params,
    init_cross_params,
    init_block_state,
    bimamba_block,
    mamba_block,
    crossmamba_block,
    block_step
)
from .config import ModelConfig
from .errors import ConfigError, ContractError
from .layers import (
    LinearParams,
    NormParams,
    init_linear,
    init_norm,
    init_action_table,
    linear,
    norm,
    embed_observations,
    embed_actions,
    shift_actions,
    check_actions
)
from .mappo import (
    MappoParams,
    init_mappo,
    mappo_encode,
    mappo_decode_parallel,
    mappo_decode
)
from .numerics import Array, Node, constant, no_grad
from . import numerics as nx

###############################################################################
# Datatypes
###############################################################################
@dataclass
class DecoderPair:
    vanilla : MambaBlockParams
    cross : CrossMambaParams

@dataclass
class MamParams:
    obs_embed : LinearParams
    action_table : Node
    encoder : List[MambaBlockParams]
    encoder_norm : NormParams
    value_head : LinearParams
    decoder : List[DecoderPair]
    decoder_norm : NormParams
    policy_head : LinearParams

Params = Union[MamParams, MatParams, MappoParams]
Selector = Callable[[Array], Array]

@dataclass
class Decoding:
    actions : Array
    log_probs : Array
    logits : Array

###############################################################################
# Initialisation
###############################################################################
def init_model(config : ModelConfig, seed : int) -> Params:
    if config.architecture == 'attention': return init_mat(config, seed)
    if config.architecture == 'mappo': return init_mappo(config, seed)
    if config.architecture != 'mam':
        raise ConfigError('Unknown architecture \"%s\"' % config.architecture)
    if config.n_blocks < 1: raise ConfigError('model.n_blocks must be positive')
    rng = np.random.default_rng(seed)
    D = config.embed_dim

    def _block() -> MambaBlockParams:
        return init_block_params(
            rng, D, config.hidden_dim, config.delta_rank, config.conv_width
        )

    return nx.assign_names(MamParams(
        obs_embed = init_linear(rng, config.obs_dim, D),
        action_table = init_action_table(rng, config.n_actions, D),
        encoder = [ _block() for _ in range(config.n_blocks) ],
        encoder_norm = init_norm(D),
        value_head = init_linear(rng, D, 1),
        decoder = [
            DecoderPair(
                vanilla = _block(),
                cross = init_cross_params(
                    rng, D, config.hidden_dim, config.delta_rank,
                    config.conv_width, D
                )
            )
            for _ in range(config.n_blocks)
        ],
        decoder_norm = init_norm(D),
        policy_head = init_linear(rng, D, config.n_actions)
    ))

def parameter_count(params : Params) -> int:
    return sum(node.value.size for _, node in nx.named_parameters(params))

def cast(params : Params, dtype : np.dtype) -> Params:
    return nx.map_parameters(params, lambda _, value: value.astype(dtype))

def n_actions_of(params : Params) -> int:
    if isinstance(params, MamParams): return params.policy_head.W.shape[1]
    return params.policy_head.out.W.shape[1]

###############################################################################
# Encoder and decoder
###############################################################################
def encode(
    params : Params,
    obs : Array,
    variant : str = 'euler',
    method : str = 'sequential'
    ) -> Tuple[Node, Node]:
    """Observations (n, obs_dim) or (batch, n, obs_dim) to the agent
    representations and one value per agent."""
    if isinstance(params, MatParams): return mat_encode(params, obs)
    if isinstance(params, MappoParams): return mappo_encode(params, obs)
    x = embed_observations(obs, params.obs_embed)
    for block in params.encoder: x = bimamba_block(x, block, variant, method)
    encoded = norm(x, params.encoder_norm)
    values = linear(encoded, params.value_head)
    return encoded, nx.reshape(values, values.shape[:-1])

def encode_forward(
    params : Params,
    obs : Array,
    variant : str = 'euler',
    method : str = 'sequential'
    ) -> Tuple[Array, Array]:
    """encode without recording a tape, returning plain arrays."""
    if isinstance(params, MatParams): return mat_encode_array(params, obs)
    with no_grad(): encoded, values = encode(params, obs, variant, method)
    return encoded.value, values.value

def _decoder_logits(
    params : MamParams,
    encoded : Node,
    tokens : Array,
    variant : str,
    method : str
    ) -> Node:
    y = embed_actions(tokens, params.action_table)
    for pair in params.decoder:
        y = mamba_block(y, pair.vanilla, variant, method)
        y = crossmamba_block(y, encoded, pair.cross, variant, method)
    return linear(norm(y, params.decoder_norm), params.policy_head)

def decode_parallel(
    params : Params,
    encoded : Node,
    actions : Array,
    variant : str = 'euler',
    method : str = 'sequential'
    ) -> Node:
    """Logits for every agent given the executed joint action; the decoder
    reads [start, a1, ..., a(n-1)]."""
    if isinstance(params, MatParams):
        return mat_decode_parallel(params, encoded, actions)
    if isinstance(params, MappoParams):
        return mappo_decode_parallel(params, encoded, actions)
    tokens = shift_actions(actions, n_actions_of(params))
    if tokens.shape != encoded.shape[:-1]:
        raise ContractError('Actions %s do not match representation %s' % (
            tokens.shape, encoded.shape
        ))
    return _decoder_logits(params, encoded, tokens, variant, method)

###############################################################################
# Action selection
###############################################################################
def log_softmax_array(logits : Array) -> Array:
    shifted = logits - logits.max(axis = -1, keepdims = True)
    return shifted - np.log(np.exp(shifted).sum(axis = -1, keepdims = True))

def greedy() -> Selector:
    return lambda logits: np.argmax(logits, axis = -1)

def sampler(rng : np.random.Generator) -> Selector:
    def _select(logits : Array) -> Array:
        probs = np.exp(log_softmax_array(logits))
        draws = rng.random(probs.shape[:-1])[..., None]
        picks = (np.cumsum(probs, axis = -1) < draws).sum(axis = -1)
        return np.minimum(picks, probs.shape[-1] - 1)
    return _select

def _selector(mode : str, seed : Union[None, int, np.random.Generator]) -> Selector:
    if mode == 'greedy': return greedy()
    if mode != 'sample': raise ConfigError('Unknown decode mode \"%s\"' % mode)
    if seed is None: raise ContractError('Sampling needs a seed or generator')
    return sampler(np.random.default_rng(seed))

def _decode_incremental(
    params : MamParams,
    encoded : Array,
    select : Selector,
    variant : str
    ) -> Tuple[Array, Array]:
    batch, n_agents, _ = encoded.shape
    n_actions = n_actions_of(params)
    dtype = encoded.dtype
    states = [
        (
            init_block_state(pair.vanilla, batch, dtype),
            init_block_state(pair.cross.block, batch, dtype)
        )
        for pair in params.decoder
    ]
    actions = np.zeros((batch, n_agents), dtype = np.int64)
    logits = np.zeros((batch, n_agents, n_actions), dtype = dtype)
    tokens = np.full(batch, n_actions, dtype = np.int64)
    for agent in range(n_agents):
        y = nx.activate('gelu', params.action_table.value[tokens])
        for index, pair in enumerate(params.decoder):
            vanilla_state, cross_state = states[index]
            y, vanilla_state = block_step(y, pair.vanilla, vanilla_state, None, variant)
            y, cross_state = block_step(
                y, pair.cross.block, cross_state, encoded[:, agent], variant
            )
            states[index] = (vanilla_state, cross_state)
        y = nx.layer_norm_array(
            y, params.decoder_norm.scale.value, params.decoder_norm.offset.value
        )
        logits[:, agent] = y @ params.policy_head.W.value + params.policy_head.b.value
        actions[:, agent] = select(logits[:, agent])
        tokens = actions[:, agent]
    return actions, logits

def _decode_recompute(
    params : MamParams,
    encoded : Node,
    select : Selector,
    variant : str,
    method : str
    ) -> Tuple[Array, Array]:
    batch, n_agents, _ = encoded.shape
    n_actions = n_actions_of(params)
    actions = np.zeros((batch, n_agents), dtype = np.int64)
    logits = np.zeros((batch, n_agents, n_actions), dtype = encoded.dtype)
    tokens = np.full((batch, n_agents), n_actions, dtype = np.int64)
    for agent in range(n_agents):
        step = _decoder_logits(
            params, encoded[:, :agent + 1], tokens[:, :agent + 1], variant, method
        )
        logits[:, agent] = step.value[:, agent]
        actions[:, agent] = select(logits[:, agent])
        if agent + 1 < n_agents: tokens[:, agent + 1] = actions[:, agent]
    return actions, logits

def decode_autoregressive(
    params : Params,
    encoded : Union[Node, Array],
    mode : str = 'greedy',
    seed : Union[None, int, np.random.Generator] = None,
    incremental : bool = True,
    variant : str = 'euler',
    method : str = 'sequential'
    ) -> Decoding:
    """Choose each agent's action in turn, conditioning on the actions
    already chosen. The incremental path carries the recurrent state per
    agent; otherwise the decoder is rerun over the prefix."""
    select = _selector(mode, seed)
    encoded = nx.lift(encoded)
    single = encoded.ndim == 2
    if single: encoded = nx.reshape(encoded, (1,) + encoded.shape)
    with no_grad():
        if isinstance(params, MatParams):
            actions, logits = mat_decode_autoregressive(params, encoded.value, select)
        elif isinstance(params, MappoParams):
            actions, logits = mappo_decode(params, encoded.value, select)
        elif incremental:
            actions, logits = _decode_incremental(params, encoded.value, select, variant)
        else:
            actions, logits = _decode_recompute(params, encoded, select, variant, method)
    log_probs = np.take_along_axis(
        log_softmax_array(logits), actions[..., None], axis = -1
    )[..., 0]
    if single: return Decoding(actions[0], log_probs[0], logits[0])
    return Decoding(actions, log_probs, logits)

###############################################################################
# Policy surface
###############################################################################
def check_agents(config : ModelConfig, obs : Array):
    if obs.ndim < 2 or obs.shape[-2] != config.n_agents or obs.shape[-1] != config.obs_dim:
        raise ContractError('Expected observations for %d agents of size %d, got %s' % (
            config.n_agents, config.obs_dim, obs.shape
        ))

def _inverse(order : Array) -> Array:
    return np.argsort(order, axis = -1)

def evaluate_actions(
    config : ModelConfig,
    params : Params,
    obs : Array,
    actions : Array,
    order : Optional[Array] = None
    ) -> Tuple[Node, Node, Node]:
    """Log-probabilities of the taken actions, policy entropies and values,
    each (batch, n) in canonical agent order. order[t] lists the agent
    decoded at each position for step t."""
    obs = np.asarray(obs)
    actions = np.asarray(actions)
    check_agents(config, obs)
    check_actions(actions, config.n_actions)
    if obs.ndim == 2: obs, actions = obs[None], actions[None]
    if order is not None:
        order = np.asarray(order).reshape(actions.shape)
        obs = np.take_along_axis(obs, order[..., None], axis = 1)
        actions = np.take_along_axis(actions, order, axis = 1)
    encoded, values = encode(params, obs, config.variant, config.scan_method)
    logits = decode_parallel(params, encoded, actions, config.variant, config.scan_method)
    logp_all = nx.log_softmax(logits, axis = -1)
    chosen = constant(np.eye(config.n_actions)[actions], logits.dtype)
    logp = nx.sum(logp_all * chosen, axis = -1)
    entropy = -nx.sum(nx.exp(logp_all) * logp_all, axis = -1)
    if order is not None:
        rows = np.arange(actions.shape[0])[:, None]
        inverse = _inverse(order)
        logp = logp[rows, inverse]
        entropy = entropy[rows, inverse]
        values = values[rows, inverse]
    return logp, entropy, values

def act(
    config : ModelConfig,
    params : Params,
    obs : Array,
    rng : np.random.Generator,
    greedy_mode : bool = False,
    order : Optional[Array] = None
    ) -> Tuple[Array, Array, Array]:
    """Joint action, its per-agent log-probabilities and the per-agent
    values for one joint observation (n, obs_dim), canonical order."""
    obs = np.asarray(obs)
    check_agents(config, obs)
    if order is not None: obs = obs[order]
    encoded, values = encode_forward(params, obs, config.variant, config.scan_method)
    decoding = decode_autoregressive(
        params, encoded,
        'greedy' if greedy_mode else 'sample', rng,
        True, config.variant, config.scan_method
    )
    actions, log_probs = decoding.actions, decoding.log_probs
    if order is None: return actions, log_probs, values
    inverse = _inverse(order)
    return actions[inverse], log_probs[inverse], values[inverse]

# External module dependencies
from dataclasses import dataclass
from typing import Callable, Tuple, List
import numpy as np

# Internal module dependencies
from .config import ModelConfig
from .errors import ConfigError, ContractError
from .layers import (
    LinearParams,
    NormParams,
    HeadParams,
    init_linear,
    init_norm,
    init_head,
    init_action_table,
    linear,
    norm,
    head,
    embed_observations,
    embed_actions,
    shift_actions,
    linear_array,
    norm_array,
    head_array
)
from .numerics import Array, Node, constant, parameter
from .ssm import uniform_fan_in
from . import numerics as nx

###############################################################################
# Datatypes
###############################################################################
MASKS = ('none', 'causal')
MASK_FILL = -1e30

@dataclass
class AttentionParams:
    W_Q : Node
    W_K : Node
    W_V : Node
    W_O : Node
    n_heads : int

    @property
    def head_dim(self) -> int:
        return self.W_Q.shape[1] // self.n_heads

@dataclass
class FeedForwardParams:
    hidden : LinearParams
    out : LinearParams

@dataclass
class EncoderBlockParams:
    attention_norm : NormParams
    attention : AttentionParams
    feed_forward_norm : NormParams
    feed_forward : FeedForwardParams

@dataclass
class DecoderBlockParams:
    self_norm : NormParams
    self_attention : AttentionParams
    cross_norm : NormParams
    cross_attention : AttentionParams
    feed_forward_norm : NormParams
    feed_forward : FeedForwardParams

@dataclass
class MatParams:
    obs_embed : LinearParams
    action_table : Node
    encoder : List[EncoderBlockParams]
    value_head : HeadParams
    decoder : List[DecoderBlockParams]
    policy_head : HeadParams

###############################################################################
# Initialisation
###############################################################################
def init_attention(
    rng : np.random.Generator,
    embed_dim : int,
    n_heads : int
    ) -> AttentionParams:
    if n_heads < 1 or embed_dim % n_heads != 0:
        raise ConfigError('Head count %d must divide embedding size %d' % (
            n_heads, embed_dim
        ))
    def _weight() -> Node:
        return parameter(uniform_fan_in(rng, embed_dim, (embed_dim, embed_dim)))
    return AttentionParams(
        W_Q = _weight(),
        W_K = _weight(),
        W_V = _weight(),
        W_O = _weight(),
        n_heads = n_heads
    )

def _init_feed_forward(rng : np.random.Generator, embed_dim : int) -> FeedForwardParams:
    return FeedForwardParams(
        hidden = init_linear(rng, embed_dim, embed_dim),
        out = init_linear(rng, embed_dim, embed_dim)
    )

def init_mat(config : ModelConfig, seed : int) -> MatParams:
    rng = np.random.default_rng(seed)
    D = config.embed_dim
    H = config.n_heads
    return nx.assign_names(MatParams(
        obs_embed = init_linear(rng, config.obs_dim, D),
        action_table = init_action_table(rng, config.n_actions, D),
        encoder = [
            EncoderBlockParams(
                attention_norm = init_norm(D),
                attention = init_attention(rng, D, H),
                feed_forward_norm = init_norm(D),
                feed_forward = _init_feed_forward(rng, D)
            )
            for _ in range(config.n_attention_blocks)
        ],
        value_head = init_head(rng, D, 1),
        decoder = [
            DecoderBlockParams(
                self_norm = init_norm(D),
                self_attention = init_attention(rng, D, H),
                cross_norm = init_norm(D),
                cross_attention = init_attention(rng, D, H),
                feed_forward_norm = init_norm(D),
                feed_forward = _init_feed_forward(rng, D)
            )
            for _ in range(config.n_attention_blocks)
        ],
        policy_head = init_head(rng, D, config.n_actions)
    ))

###############################################################################
# Attention
###############################################################################
def _batched(function : Callable[..., Node], *sequences : Node) -> Node:
    if sequences[0].ndim == 3: return function(*sequences)
    result = function(*[
        nx.reshape(sequence, (1,) + sequence.shape)
        for sequence in sequences
    ])
    return nx.reshape(result, result.shape[1:])

def _split_heads(x : Node, params : AttentionParams) -> Node:
    batch, length, _ = x.shape
    return nx.transpose(
        nx.reshape(x, (batch, length, params.n_heads, params.head_dim)),
        (0, 2, 1, 3)
    )

def _check_mask(mask : str):
    if mask in MASKS: return
    raise ConfigError('Unknown attention mask \"%s\"' % mask)

def _weights(q_src : Node, kv_src : Node, params : AttentionParams, mask : str) -> Node:
    if q_src.shape[-1] != params.W_Q.shape[0] or kv_src.shape[-1] != params.W_K.shape[0]:
        raise ContractError('Attention token size mismatch')
    if q_src.shape[1] == 0 or kv_src.shape[1] == 0:
        raise ContractError('Attention expects non-empty sequences')
    Q = _split_heads(q_src @ params.W_Q, params)
    K = _split_heads(kv_src @ params.W_K, params)
    scores = (Q @ nx.transpose(K, (0, 1, 3, 2))) * (1.0 / np.sqrt(params.head_dim))
    if mask == 'causal':
        if q_src.shape[1] != kv_src.shape[1]:
            raise ContractError('Causal attention expects equal lengths')
        length = q_src.shape[1]
        future = np.triu(np.ones((length, length), dtype = bool), k = 1)
        scores = scores + constant(np.where(future, MASK_FILL, 0.0), scores.dtype)
    return nx.softmax(scores, axis = -1)

def attention_weights(
    q_src : Node,
    kv_src : Node,
    params : AttentionParams,
    mask : str = 'none'
    ) -> Array:
    """Per-head attention matrices, (batch, heads, L_q, L_kv)."""
    _check_mask(mask)
    if q_src.ndim == 2:
        q_src = nx.reshape(q_src, (1,) + q_src.shape)
        kv_src = nx.reshape(kv_src, (1,) + kv_src.shape)
    return _weights(q_src, kv_src, params, mask).value

def attention(
    q_src : Node,
    kv_src : Node,
    params : AttentionParams,
    mask : str = 'none'
    ) -> Node:
    _check_mask(mask)
    def _apply(q_src : Node, kv_src : Node) -> Node:
        batch, length, embed = q_src.shape
        weights = _weights(q_src, kv_src, params, mask)
        V = _split_heads(kv_src @ params.W_V, params)
        heads = nx.transpose(weights @ V, (0, 2, 1, 3))
        return nx.reshape(heads, (batch, length, embed)) @ params.W_O
    return _batched(_apply, q_src, kv_src)

###############################################################################
# Backbone
###############################################################################
def _feed_forward(x : Node, params : FeedForwardParams) -> Node:
    return linear(nx.gelu(linear(x, params.hidden)), params.out)

def encoder_block(x : Node, params : EncoderBlockParams) -> Node:
    z = norm(x, params.attention_norm)
    x = x + attention(z, z, params.attention, 'none')
    return x + _feed_forward(norm(x, params.feed_forward_norm), params.feed_forward)

def decoder_block(y : Node, encoded : Node, params : DecoderBlockParams) -> Node:
    z = norm(y, params.self_norm)
    y = y + attention(z, z, params.self_attention, 'causal')
    y = y + attention(
        encoded, norm(y, params.cross_norm), params.cross_attention, 'causal'
    )
    return y + _feed_forward(norm(y, params.feed_forward_norm), params.feed_forward)

def mat_backbone(
    obs_emb : Node,
    action_emb : Node,
    params : MatParams
    ) -> Tuple[Node, Node]:
    if obs_emb.shape != action_emb.shape:
        raise ContractError('Observation and action streams differ: %s vs %s' % (
            obs_emb.shape, action_emb.shape
        ))
    encoded = _encoder_stack(obs_emb, params)
    return encoded, _decoder_stack(action_emb, encoded, params)

###############################################################################
# Policy surface
###############################################################################
def _encoder_stack(obs_emb : Node, params : MatParams) -> Node:
    encoded = obs_emb
    for block in params.encoder: encoded = encoder_block(encoded, block)
    return encoded

def _decoder_stack(action_emb : Node, encoded : Node, params : MatParams) -> Node:
    features = action_emb
    for block in params.decoder: features = decoder_block(features, encoded, block)
    return features

def mat_encode(params : MatParams, obs : Array) -> Tuple[Node, Node]:
    encoded = _encoder_stack(embed_observations(obs, params.obs_embed), params)
    values = head(encoded, params.value_head)
    return encoded, nx.reshape(values, values.shape[:-1])

def mat_decode_parallel(params : MatParams, encoded : Node, actions : Array) -> Node:
    n_actions = params.policy_head.out.W.shape[1]
    tokens = shift_actions(actions, n_actions)
    if tokens.shape != encoded.shape[:-1]:
        raise ContractError('Actions %s do not match representation %s' % (
            tokens.shape, encoded.shape
        ))
    features = _decoder_stack(embed_actions(tokens, params.action_table), encoded, params)
    return head(features, params.policy_head)

###############################################################################
# Forward-only inference
###############################################################################
def _attention_array(
    q_src : Array,
    kv_src : Array,
    params : AttentionParams,
    mask : str
    ) -> Array:
    batch, length, embed = q_src.shape
    def _split(x : Array) -> Array:
        shape = (batch, x.shape[1], params.n_heads, params.head_dim)
        return x.reshape(shape).transpose(0, 2, 1, 3)
    Q = _split(q_src @ params.W_Q.value)
    K = _split(kv_src @ params.W_K.value)
    V = _split(kv_src @ params.W_V.value)
    scores = (Q @ K.transpose(0, 1, 3, 2)) * (1.0 / float(np.sqrt(params.head_dim)))
    if mask == 'causal':
        future = np.triu(np.ones((length, kv_src.shape[1]), dtype = bool), k = 1)
        scores = scores + np.where(future, MASK_FILL, 0.0).astype(scores.dtype)
    e = np.exp(scores - scores.max(axis = -1, keepdims = True))
    weights = e / e.sum(axis = -1, keepdims = True)
    heads = (weights @ V).transpose(0, 2, 1, 3).reshape(batch, length, embed)
    return heads @ params.W_O.value

def _feed_forward_array(x : Array, params : FeedForwardParams) -> Array:
    return linear_array(nx.activate('gelu', linear_array(x, params.hidden)), params.out)

def _encoder_block_array(x : Array, params : EncoderBlockParams) -> Array:
    z = norm_array(x, params.attention_norm)
    x = x + _attention_array(z, z, params.attention, 'none')
    return x + _feed_forward_array(norm_array(x, params.feed_forward_norm), params.feed_forward)

def _decoder_block_array(
    y : Array,
    encoded : Array,
    params : DecoderBlockParams
    ) -> Array:
    z = norm_array(y, params.self_norm)
    y = y + _attention_array(z, z, params.self_attention, 'causal')
    y = y + _attention_array(
        encoded, norm_array(y, params.cross_norm), params.cross_attention, 'causal'
    )
    return y + _feed_forward_array(norm_array(y, params.feed_forward_norm), params.feed_forward)

def mat_encode_array(params : MatParams, obs : Array) -> Tuple[Array, Array]:
    """mat_encode on plain arrays, for inference."""
    W = params.obs_embed.W.value
    obs = np.asarray(obs, dtype = W.dtype)
    if obs.shape[-1] != W.shape[0]:
        raise ContractError('Observation size %d does not match %d' % (
            obs.shape[-1], W.shape[0]
        ))
    single = obs.ndim == 2
    x = nx.activate('gelu', linear_array(obs[None] if single else obs, params.obs_embed))
    for block in params.encoder: x = _encoder_block_array(x, block)
    values = head_array(x, params.value_head)[..., 0]
    if single: return x[0], values[0]
    return x, values

def mat_decode_autoregressive(
    params : MatParams,
    encoded : Array,
    select : Callable[[Array], Array]
    ) -> Tuple[Array, Array]:
    """Decode agents in order, recomputing the decoder over the whole
    prefix for every agent; encoded is (batch, n, embed). Runs on plain
    arrays, so no tape is recorded. Returns the chosen actions and the
    per-agent logits."""
    n_actions = params.policy_head.out.W.shape[1]
    batch, n_agents, _ = encoded.shape
    table = params.action_table.value
    actions = np.zeros((batch, n_agents), dtype = np.int64)
    logits = np.zeros((batch, n_agents, n_actions), dtype = encoded.dtype)
    tokens = np.full((batch, n_agents), n_actions, dtype = np.int64)
    for agent in range(n_agents):
        prefix = encoded[:, :agent + 1]
        features = nx.activate('gelu', table[tokens[:, :agent + 1]])
        for block in params.decoder:
            features = _decoder_block_array(features, prefix, block)
        step = head_array(features[:, agent], params.policy_head)
        logits[:, agent] = step
        actions[:, agent] = select(step)
        if agent + 1 < n_agents: tokens[:, agent + 1] = actions[:, agent]
    return actions, logits

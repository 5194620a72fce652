# External module dependencies
from dataclasses import dataclass
import numpy as np

# Internal module dependencies
from .errors import ContractError
from .numerics import Array, Node, constant, parameter
from .ssm import uniform_fan_in
from . import numerics as nx

###############################################################################
# Datatypes
###############################################################################
@dataclass
class LinearParams:
    W : Node
    b : Node

@dataclass
class NormParams:
    scale : Node
    offset : Node

@dataclass
class HeadParams:
    hidden : LinearParams
    norm : NormParams
    out : LinearParams

###############################################################################
# Initialisation
###############################################################################
def init_linear(
    rng : np.random.Generator,
    fan_in : int,
    fan_out : int
    ) -> LinearParams:
    return LinearParams(
        W = parameter(uniform_fan_in(rng, fan_in, (fan_in, fan_out))),
        b = parameter(np.zeros(fan_out))
    )

def init_norm(size : int) -> NormParams:
    return NormParams(
        scale = parameter(np.ones(size)),
        offset = parameter(np.zeros(size))
    )

def init_head(
    rng : np.random.Generator,
    embed_dim : int,
    out_dim : int
    ) -> HeadParams:
    return HeadParams(
        hidden = init_linear(rng, embed_dim, embed_dim),
        norm = init_norm(embed_dim),
        out = init_linear(rng, embed_dim, out_dim)
    )

def init_action_table(
    rng : np.random.Generator,
    n_actions : int,
    embed_dim : int
    ) -> Node:
    # Last row is the start token
    return parameter(uniform_fan_in(rng, embed_dim, (n_actions + 1, embed_dim)))

###############################################################################
# Functions
###############################################################################
def linear(x : Node, params : LinearParams) -> Node:
    return x @ params.W + params.b

def norm(x : Node, params : NormParams) -> Node:
    return nx.layer_norm(x, params.scale, params.offset)

def head(x : Node, params : HeadParams) -> Node:
    hidden = nx.gelu(linear(x, params.hidden))
    return linear(norm(hidden, params.norm), params.out)

def embed_observations(obs : Array, params : LinearParams) -> Node:
    if obs.shape[-1] != params.W.shape[0]:
        raise ContractError('Observation size %d does not match %d' % (
            obs.shape[-1], params.W.shape[0]
        ))
    return nx.gelu(linear(constant(obs, params.W.dtype), params))

def shift_actions(actions : Array, n_actions : int) -> Array:
    """[a1, ..., an] -> [start, a1, ..., a(n-1)] along the last axis."""
    actions = np.asarray(actions)
    check_actions(actions, n_actions)
    start = np.full(actions.shape[:-1] + (1,), n_actions, dtype = np.int64)
    return np.concatenate([start, actions[..., :-1].astype(np.int64)], axis = -1)

def check_actions(actions : Array, n_actions : int):
    if actions.size == 0: return
    if np.issubdtype(actions.dtype, np.integer) and \
        0 <= actions.min() and actions.max() < n_actions: return
    raise ContractError('Actions must be integers in [0, %d)' % n_actions)

def embed_actions(tokens : Array, table : Node) -> Node:
    return nx.gelu(table[np.asarray(tokens, dtype = np.int64)])

###############################################################################
# Forward-only forms
###############################################################################
def linear_array(x : Array, params : LinearParams) -> Array:
    return x @ params.W.value + params.b.value

def norm_array(x : Array, params : NormParams) -> Array:
    return nx.layer_norm_array(x, params.scale.value, params.offset.value)

def head_array(x : Array, params : HeadParams) -> Array:
    hidden = nx.activate('gelu', linear_array(x, params.hidden))
    return linear_array(norm_array(hidden, params.norm), params.out)

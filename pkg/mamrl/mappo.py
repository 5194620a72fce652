# External module dependencies
from dataclasses import dataclass
from typing import Callable, Tuple
import numpy as np

# Internal module dependencies
from .config import ModelConfig
from .errors import ContractError
from .layers import (
    LinearParams,
    HeadParams,
    init_linear,
    init_head,
    head,
    head_array,
    embed_observations
)
from .numerics import Array, Node, constant
from . import numerics as nx

###############################################################################
# Datatypes
###############################################################################
@dataclass
class MappoParams:
    actor_embed : LinearParams
    policy_head : HeadParams
    critic_embed : LinearParams
    value_head : HeadParams

###############################################################################
# Initialisation
###############################################################################
def init_mappo(config : ModelConfig, seed : int) -> MappoParams:
    rng = np.random.default_rng(seed)
    D = config.embed_dim
    return nx.assign_names(MappoParams(
        actor_embed = init_linear(rng, config.obs_dim, D),
        policy_head = init_head(rng, D, config.n_actions),
        critic_embed = init_linear(rng, config.obs_dim, D),
        value_head = init_head(rng, 2 * D, 1)
    ))

###############################################################################
# Policy surface
###############################################################################
def mappo_encode(params : MappoParams, obs : Array) -> Tuple[Node, Node]:
    """Actor features from each agent's own observation, and one value per
    agent from a critic that reads the agent next to the mean over all
    agents."""
    features = embed_observations(obs, params.actor_embed)
    own = embed_observations(obs, params.critic_embed)
    pooled = nx.mean(own, axis = -2, keepdims = True) + constant(np.zeros(own.shape), own.dtype)
    values = head(nx.concat([own, pooled], axis = -1), params.value_head)
    return features, nx.reshape(values, values.shape[:-1])

def mappo_decode_parallel(params : MappoParams, features : Node, actions : Array) -> Node:
    if np.shape(actions) != features.shape[:-1]:
        raise ContractError('Actions %s do not match representation %s' % (
            np.shape(actions), features.shape
        ))
    return head(features, params.policy_head)

def mappo_decode(
    params : MappoParams,
    features : Array,
    select : Callable[[Array], Array]
    ) -> Tuple[Array, Array]:
    """Every agent acts on its own features alone; features is
    (batch, n, embed)."""
    logits = head_array(features, params.policy_head)
    actions = np.zeros(features.shape[:-1], dtype = np.int64)
    for agent in range(features.shape[1]): actions[:, agent] = select(logits[:, agent])
    return actions, logits

# External module dependencies
from dataclasses import dataclass
from itertools import permutations
from typing import Optional, Sequence, Tuple, List
import numpy as np

# Internal module dependencies
from .errors import ContractError
from .numerics import Array

###############################################################################
# Datatypes
###############################################################################
MAX_AGENTS = 3
MAX_ACTIONS = 4
MAX_STATES = 20

@dataclass
class TabularGame:
    rewards : Array
    transitions : Array
    gamma : float

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_agents(self) -> int:
        return self.rewards.ndim - 1

    @property
    def action_counts(self) -> Tuple[int, ...]:
        return self.rewards.shape[1:]

FactorizedPolicy = List[Array]

###############################################################################
# Generators
###############################################################################
def random_tabular_game(
    rng : np.random.Generator,
    n_agents : int,
    n_actions : int,
    n_states : int,
    gamma : float = 0.9
    ) -> TabularGame:
    shape = (n_states,) + (n_actions,) * n_agents
    transitions = rng.random(shape + (n_states,))
    return TabularGame(
        rewards = rng.normal(size = shape),
        transitions = transitions / transitions.sum(axis = -1, keepdims = True),
        gamma = gamma
    )

def random_factorized_policy(
    rng : np.random.Generator,
    game : TabularGame
    ) -> FactorizedPolicy:
    result : FactorizedPolicy = list()
    for count in game.action_counts:
        logits = rng.normal(size = (game.n_states, count))
        probs = np.exp(logits)
        result.append(probs / probs.sum(axis = 1, keepdims = True))
    return result

###############################################################################
# Exact evaluation
###############################################################################
def _check_size(game : TabularGame, policy : FactorizedPolicy):
    if game.n_agents > MAX_AGENTS or game.n_states > MAX_STATES or \
        max(game.action_counts) > MAX_ACTIONS:
        raise ContractError(
            'Tabular game too large for exact evaluation: '
            '%d agents, %s actions, %d states (limits %d, %d, %d)' % (
            game.n_agents, game.action_counts, game.n_states,
            MAX_AGENTS, MAX_ACTIONS, MAX_STATES
        ))
    if len(policy) != game.n_agents:
        raise ContractError('Policy covers %d agents, game has %d' % (
            len(policy), game.n_agents
        ))
    for agent, probs in enumerate(policy):
        if probs.shape == (game.n_states, game.action_counts[agent]): continue
        raise ContractError('Policy of agent %d has shape %s' % (agent, probs.shape))

def _agent_weights(game : TabularGame, policy : FactorizedPolicy, agent : int) -> Array:
    shape = [game.n_states] + [1] * game.n_agents
    shape[1 + agent] = game.action_counts[agent]
    return policy[agent].reshape(shape)

def marginal_q(
    game : TabularGame,
    policy : FactorizedPolicy,
    Q : Array,
    keep : Sequence[int]
    ) -> Array:
    """Q averaged over the agents not in keep under their policies; the
    averaged axes stay with size one."""
    result = Q
    for agent in range(game.n_agents):
        if agent in keep: continue
        result = (result * _agent_weights(game, policy, agent)).sum(
            axis = 1 + agent, keepdims = True
        )
    return result

def exact_values(game : TabularGame, policy : FactorizedPolicy) -> Tuple[Array, Array]:
    _check_size(game, policy)
    joint = np.ones(game.rewards.shape)
    for agent in range(game.n_agents):
        joint = joint * _agent_weights(game, policy, agent)
    agent_axes = tuple(range(1, game.n_agents + 1))
    reward = (joint * game.rewards).sum(axis = agent_axes)
    flow = (joint[..., None] * game.transitions).sum(axis = agent_axes)
    V = np.linalg.solve(np.eye(game.n_states) - game.gamma * flow, reward)
    Q = game.rewards + game.gamma * (game.transitions @ V)
    return V, Q

###############################################################################
# Advantage decomposition
###############################################################################
def advantage_decomposition_check(
    game : TabularGame,
    policy : FactorizedPolicy,
    permutation : Optional[Sequence[int]] = None
    ) -> float:
    """Largest gap over states and joint actions between the joint
    advantage and the sum of the sequential per-agent advantages taken in
    the given agent order."""
    _check_size(game, policy)
    order = list(range(game.n_agents)) if permutation is None else list(permutation)
    if sorted(order) != list(range(game.n_agents)):
        raise ContractError('%s is not a permutation of %d agents' % (
            order, game.n_agents
        ))
    V, Q = exact_values(game, policy)
    joint = Q - V.reshape((-1,) + (1,) * game.n_agents)
    total = np.zeros_like(Q)
    for m in range(game.n_agents):
        total = total + (
            marginal_q(game, policy, Q, order[:m + 1]) -
            marginal_q(game, policy, Q, order[:m])
        )
    return float(np.abs(joint - total).max())

def decomposition_residuals(
    game : TabularGame,
    policy : FactorizedPolicy
    ) -> List[float]:
    return [
        advantage_decomposition_check(game, policy, order)
        for order in permutations(range(game.n_agents))
    ]

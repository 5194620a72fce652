# External module dependencies
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Any, Tuple
import numpy as np

# Internal module dependencies
from .config import EnvConfig
from .errors import ConfigError, ContractError
from .numerics import Array

###############################################################################
# Classes
###############################################################################
class MarkovGame(ABC):
    """Cooperative game with a shared reward. The state is an immutable
    value: step returns a new state and leaves its argument untouched."""
    def __init__(self, n_agents : int, n_actions : int, horizon : int):
        if min(n_agents, n_actions, horizon) < 1:
            raise ConfigError('Game sizes must be positive')
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.horizon = horizon

    @property
    @abstractmethod
    def obs_dim(self) -> int: raise NotImplementedError()

    @property
    @abstractmethod
    def optimal_return(self) -> float: raise NotImplementedError()

    @abstractmethod
    def reset(self, seed : int) -> Tuple[Any, Array]: raise NotImplementedError()

    @abstractmethod
    def step(self, state : Any, joint_action : Array) -> Tuple[Any, Array, float, bool]:
        raise NotImplementedError()

    def _agent_ids(self) -> Array:
        return np.eye(self.n_agents)

    def _check_action(self, joint_action : Array) -> Array:
        joint_action = np.asarray(joint_action)
        if joint_action.shape != (self.n_agents,):
            raise ContractError('Expected %d actions, got shape %s' % (
                self.n_agents, joint_action.shape
            ))
        if not np.issubdtype(joint_action.dtype, np.integer) or \
            joint_action.min() < 0 or joint_action.max() >= self.n_actions:
            raise ContractError('Actions must be integers in [0, %d), got %s' % (
                self.n_actions, joint_action.tolist()
            ))
        return joint_action

###############################################################################
# Consensus
###############################################################################
@dataclass(frozen = True)
class ConsensusState:
    t : int
    last : Array

class ConsensusGame(MarkovGame):
    """Every agent picks one of k actions; the shared reward is 1 when all
    picks agree. Agents see their own previous action and their ID."""

    @property
    def obs_dim(self) -> int:
        return self.n_actions + self.n_agents

    @property
    def optimal_return(self) -> float:
        return float(self.horizon)

    def _observe(self, state : ConsensusState) -> Array:
        last = np.zeros((self.n_agents, self.n_actions))
        played = state.last >= 0
        last[np.arange(self.n_agents)[played], state.last[played]] = 1.0
        return np.concatenate([last, self._agent_ids()], axis = 1)

    def reset(self, seed : int) -> Tuple[ConsensusState, Array]:
        state = ConsensusState(t = 0, last = np.full(self.n_agents, -1, dtype = np.int64))
        return state, self._observe(state)

    def step(
        self,
        state : ConsensusState,
        joint_action : Array
        ) -> Tuple[ConsensusState, Array, float, bool]:
        joint_action = self._check_action(joint_action)
        reward = 1.0 if np.all(joint_action == joint_action[0]) else 0.0
        state = ConsensusState(t = state.t + 1, last = joint_action.astype(np.int64))
        return state, self._observe(state), reward, state.t >= self.horizon

###############################################################################
# Foraging
###############################################################################
STAY, UP, DOWN, LEFT, RIGHT, LOAD = range(6)
MOVES = np.array([[0, 0], [-1, 0], [1, 0], [0, -1], [0, 1], [0, 0]])

@dataclass(frozen = True)
class ForagingState:
    t : int
    positions : Array
    levels : Array
    food_positions : Array
    food_levels : Array
    food_alive : Array

class ForagingGame(MarkovGame):
    """Small grid where agents load food items whose level is at most the
    summed level of the adjacent loading agents. The shared reward is the
    collected food level over the total food level, so an episode pays at
    most 1."""
    def __init__(self,
        n_agents : int,
        horizon : int,
        grid_size : int = 5,
        n_food : int = 2,
        max_level : int = 2
        ):
        super().__init__(n_agents, len(MOVES), horizon)
        if min(grid_size, n_food, max_level) < 1:
            raise ConfigError('Foraging sizes must be positive')
        if n_agents + n_food > grid_size * grid_size:
            raise ConfigError('Grid %dx%d cannot hold %d agents and %d food' % (
                grid_size, grid_size, n_agents, n_food
            ))
        self.grid_size = grid_size
        self.n_food = n_food
        self.max_level = max_level

    @property
    def obs_dim(self) -> int:
        return 3 + 4 * self.n_food + 3 * self.n_agents

    @property
    def optimal_return(self) -> float:
        return 1.0

    def _observe(self, state : ForagingState) -> Array:
        g = float(self.grid_size)
        rows = list()
        for agent in range(self.n_agents):
            here = state.positions[agent]
            food = np.concatenate([
                (state.food_positions - here) / g,
                state.food_levels[:, None] / self.max_level,
                state.food_alive[:, None].astype(np.float64)
            ], axis = 1) * state.food_alive[:, None]
            rows.append(np.concatenate([
                here / g,
                [state.levels[agent] / self.max_level],
                food.reshape(-1),
                ((state.positions - here) / g).reshape(-1)
            ]))
        return np.concatenate([np.stack(rows), self._agent_ids()], axis = 1)

    def reset(self, seed : int) -> Tuple[ForagingState, Array]:
        rng = np.random.default_rng(seed)
        cells = rng.choice(
            self.grid_size * self.grid_size,
            size = self.n_agents + self.n_food,
            replace = False
        )
        coords = np.stack([cells // self.grid_size, cells % self.grid_size], axis = 1)
        levels = rng.integers(1, self.max_level + 1, size = self.n_agents)
        food_levels = np.minimum(
            rng.integers(1, self.max_level + 1, size = self.n_food),
            levels.sum()
        )
        state = ForagingState(
            t = 0,
            positions = coords[:self.n_agents],
            levels = levels,
            food_positions = coords[self.n_agents:],
            food_levels = food_levels,
            food_alive = np.ones(self.n_food, dtype = bool)
        )
        return state, self._observe(state)

    def _move(self, state : ForagingState, joint_action : Array) -> Array:
        # Moves into walls, food, occupied cells or contested cells are cancelled
        targets = state.positions + MOVES[joint_action]
        inside = np.all((targets >= 0) & (targets < self.grid_size), axis = 1)
        blocked = {
            tuple(cell) for cell in state.food_positions[state.food_alive]
        } | { tuple(cell) for cell in state.positions }
        claims = dict()
        for agent in range(self.n_agents):
            cell = tuple(targets[agent])
            claims[cell] = claims.get(cell, 0) + 1
        result = state.positions.copy()
        for agent in range(self.n_agents):
            cell = tuple(targets[agent])
            if not inside[agent]: continue
            if cell in blocked or claims[cell] > 1: continue
            result[agent] = targets[agent]
        return result

    def step(
        self,
        state : ForagingState,
        joint_action : Array
        ) -> Tuple[ForagingState, Array, float, bool]:
        joint_action = self._check_action(joint_action)
        loading = joint_action == LOAD
        total = float(state.food_levels.sum())
        alive = state.food_alive.copy()
        collected = 0.0
        for food in np.flatnonzero(alive):
            distance = np.abs(state.positions - state.food_positions[food]).sum(axis = 1)
            helpers = loading & (distance == 1)
            if state.levels[helpers].sum() < state.food_levels[food]: continue
            if not np.any(helpers): continue
            alive[food] = False
            collected += float(state.food_levels[food])
        state = replace(state,
            t = state.t + 1,
            positions = self._move(state, joint_action),
            food_alive = alive
        )
        done = state.t >= self.horizon or not np.any(alive)
        return state, self._observe(state), collected / total, done

###############################################################################
# Functions
###############################################################################
def make_game(config : EnvConfig) -> MarkovGame:
    if config.name == 'consensus':
        return ConsensusGame(config.n_agents, config.n_actions, config.horizon)
    if config.name == 'foraging':
        return ForagingGame(
            config.n_agents, config.horizon,
            config.grid_size, config.n_food, config.max_level
        )
    raise ConfigError('Unknown game \"%s\"' % config.name)

# External module dependencies
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Sequence, Tuple, List
import numpy as np

# Internal module dependencies
from .config import ModelConfig, TrainConfig
from .errors import ContractError, NonFiniteError
from .evaluate import Job, Pool
from .games import MarkovGame
from .model import Params, act, evaluate_actions
from .numerics import Array, Gradients, Node, backward, constant
from . import numerics as nx

###############################################################################
# Datatypes
###############################################################################
@dataclass
class RolloutBatch:
    observations : Array
    actions : Array
    rewards : Array
    values : Array
    log_probs : Array
    dones : Array
    bootstrap : Array
    advantages : Array
    returns : Array
    orders : Optional[Array] = None
    episode_returns : List[float] = field(default_factory = list)

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

@dataclass
class LossStats:
    policy_loss : float
    value_loss : float
    entropy : float
    approx_kl : float
    clip_fraction : float

@dataclass
class EvalResult:
    returns : List[float]
    mean : float
    ci_low : float
    ci_high : float

###############################################################################
# Advantages
###############################################################################
def _broadcast_rewards(rewards : Array, values : Array) -> Array:
    rewards = np.asarray(rewards, dtype = np.float64)
    if values.ndim == 1: return rewards
    return rewards.reshape((-1,) + (1,) * (values.ndim - 1)) * np.ones_like(values)

def gae(
    rewards : Array,
    values : Array,
    bootstrap_value : Array,
    gamma : float,
    lam : float,
    dones : Array
    ) -> Tuple[Array, Array]:
    """Generalised advantage estimates over the leading time axis; the
    shared reward is broadcast to every agent column of values."""
    values = np.asarray(values, dtype = np.float64)
    dones = np.asarray(dones, dtype = np.float64)
    length = values.shape[0]
    if len(rewards) != length or len(dones) != length:
        raise ContractError('GAE inputs differ in length: %d rewards, %d values, %d dones' % (
            len(rewards), length, len(dones)
        ))
    rewards = _broadcast_rewards(rewards, values)
    mask = dones.reshape((-1,) + (1,) * (values.ndim - 1))
    next_values = np.concatenate([values[1:], np.asarray(bootstrap_value)[None]], axis = 0)
    deltas = rewards + gamma * next_values * (1.0 - mask) - values
    advantages = np.zeros_like(values)
    carry = np.zeros_like(values[0])
    for t in reversed(range(length)):
        carry = deltas[t] + gamma * lam * (1.0 - mask[t]) * carry
        advantages[t] = carry
    return advantages, advantages + values

def gae_reference(
    rewards : Array,
    values : Array,
    bootstrap_value : Array,
    gamma : float,
    lam : float,
    dones : Array
    ) -> Array:
    """The advantage as the discounted sum of TD residuals, one double
    loop per timestep."""
    values = np.asarray(values, dtype = np.float64)
    rewards = _broadcast_rewards(rewards, values)
    length = values.shape[0]
    result = np.zeros_like(values)
    for t in range(length):
        weight = 1.0
        for s in range(t, length):
            following = values[s + 1] if s + 1 < length else np.asarray(bootstrap_value)
            delta = rewards[s] + gamma * following * (1.0 - dones[s]) - values[s]
            result[t] = result[t] + weight * delta
            if dones[s]: break
            weight = weight * gamma * lam
    return result

###############################################################################
# Objective
###############################################################################
def mappo_loss(
    new_logp : Node,
    old_logp : Array,
    advantages : Array,
    values_pred : Node,
    returns : Array,
    entropy : Node,
    cfg : TrainConfig
    ) -> Tuple[Node, LossStats]:
    for name, value in [
        ('new_logp', new_logp.value), ('old_logp', old_logp),
        ('advantages', advantages), ('values_pred', values_pred.value),
        ('returns', returns), ('entropy', entropy.value)
    ]:
        if np.all(np.isfinite(value)): continue
        raise NonFiniteError('Loss input %s holds non-finite values' % name)
    if new_logp.shape != np.shape(old_logp) or new_logp.shape != np.shape(advantages):
        raise ContractError('Loss inputs are misaligned: %s, %s, %s' % (
            new_logp.shape, np.shape(old_logp), np.shape(advantages)
        ))

    dtype = new_logp.dtype
    A = constant(advantages, dtype)
    ratio = nx.exp(new_logp - constant(old_logp, dtype))
    unclipped = ratio * A
    clipped = nx.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * A
    policy_loss = -nx.mean(nx.minimum(unclipped, clipped))
    error = values_pred - constant(returns, dtype)
    value_loss = nx.mean(error * error)
    entropy_mean = nx.mean(entropy)
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy_mean

    r = ratio.value
    stats = LossStats(
        policy_loss = float(policy_loss.value),
        value_loss = float(value_loss.value),
        entropy = float(entropy_mean.value),
        approx_kl = float(np.mean((r - 1.0) - np.log(r))),
        clip_fraction = float(np.mean(np.abs(r - 1.0) > cfg.clip_eps))
    )
    return total, stats

###############################################################################
# Optimisation
###############################################################################
class Adam:
    def __init__(self,
        params : Params,
        learning_rate : float,
        beta1 : float = 0.9,
        beta2 : float = 0.999,
        epsilon : float = 1e-8
        ):
        self.nodes = [ node for _, node in nx.named_parameters(params) ]
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.steps = 0
        self._m = [ np.zeros_like(node.value) for node in self.nodes ]
        self._v = [ np.zeros_like(node.value) for node in self.nodes ]

    def step(self, grads : Gradients):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for index, node in enumerate(self.nodes):
            grad = grads[node]
            self._m[index] = self.beta1 * self._m[index] + (1.0 - self.beta1) * grad
            self._v[index] = self.beta2 * self._v[index] + (1.0 - self.beta2) * grad * grad
            update = (self._m[index] / correction1) / (
                np.sqrt(self._v[index] / correction2) + self.epsilon
            )
            node.value = (node.value - self.learning_rate * update).astype(node.dtype)

def clip_by_global_norm(grads : Gradients, max_norm : float) -> Tuple[Gradients, float]:
    norm = float(np.sqrt(sum(float(np.sum(grad * grad)) for grad in grads.values())))
    if not np.isfinite(norm): raise NonFiniteError('Gradient norm is not finite')
    if norm <= max_norm: return grads, norm
    scale = max_norm / norm
    return { node : grad * scale for node, grad in grads.items() }, norm

###############################################################################
# Rollouts
###############################################################################
def collect_rollout(
    game : MarkovGame,
    config : ModelConfig,
    params : Params,
    cfg : TrainConfig,
    seed : int
    ) -> RolloutBatch:
    if game.n_agents != config.n_agents:
        raise ContractError('Game has %d agents, model expects %d' % (
            game.n_agents, config.n_agents
        ))
    rng = np.random.default_rng(seed)
    length = cfg.rollout_length
    n = game.n_agents
    observations = np.zeros((length, n, game.obs_dim))
    actions = np.zeros((length, n), dtype = np.int64)
    rewards = np.zeros(length)
    values = np.zeros((length, n))
    log_probs = np.zeros((length, n))
    dones = np.zeros(length)
    orders = np.zeros((length, n), dtype = np.int64) if config.permute_agents else None
    episode_returns : List[float] = list()
    episode_return = 0.0

    def _reset():
        return game.reset(int(rng.integers(0, 2 ** 31 - 1)))

    state, obs = _reset()
    for t in range(length):
        order = rng.permutation(n) if orders is not None else None
        action, logp, value = act(config, params, obs, rng, False, order)
        observations[t] = obs
        actions[t] = action
        values[t] = value
        log_probs[t] = logp
        if orders is not None: orders[t] = order
        try: state, obs, reward, done = game.step(state, action)
        except ContractError as error:
            raise ContractError('Game step %d failed: %s' % (t, error))
        rewards[t] = reward
        dones[t] = float(done)
        episode_return += reward
        if done:
            episode_returns.append(episode_return)
            episode_return = 0.0
            state, obs = _reset()

    bootstrap = np.zeros(n)
    if not dones[-1]:
        order = rng.permutation(n) if orders is not None else None
        _, _, bootstrap = act(config, params, obs, rng, False, order)
    advantages, returns = gae(
        rewards, values, bootstrap, cfg.gamma, cfg.gae_lambda, dones
    )
    return RolloutBatch(
        observations = observations,
        actions = actions,
        rewards = rewards,
        values = values,
        log_probs = log_probs,
        dones = dones,
        bootstrap = bootstrap,
        advantages = advantages,
        returns = returns,
        orders = orders,
        episode_returns = episode_returns
    )

def ppo_update(
    config : ModelConfig,
    params : Params,
    batch : RolloutBatch,
    optimizer : Adam,
    cfg : TrainConfig,
    rng : np.random.Generator
    ) -> LossStats:
    history : List[LossStats] = list()
    for _ in range(cfg.epochs):
        for index in np.array_split(rng.permutation(batch.length), cfg.minibatches):
            advantages = batch.advantages[index]
            if cfg.normalize_advantage:
                advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
            logp, entropy, values = evaluate_actions(
                config, params,
                batch.observations[index],
                batch.actions[index],
                None if batch.orders is None else batch.orders[index]
            )
            loss, stats = mappo_loss(
                logp, batch.log_probs[index], advantages,
                values, batch.returns[index], entropy, cfg
            )
            grads, _ = clip_by_global_norm(
                backward(loss, optimizer.nodes), cfg.max_grad_norm
            )
            optimizer.step(grads)
            history.append(stats)
    return LossStats(**{
        name : float(np.mean([ getattr(stats, name) for stats in history ]))
        for name in LossStats.__dataclass_fields__
    })

###############################################################################
# Evaluation
###############################################################################
def run_episode(
    game : MarkovGame,
    config : ModelConfig,
    params : Params,
    seed : int
    ) -> float:
    rng = np.random.default_rng(seed)
    state, obs = game.reset(seed)
    total = 0.0
    for _ in range(game.horizon):
        action, _, _ = act(config, params, obs, rng, True)
        state, obs, reward, done = game.step(state, action)
        total += reward
        if done: break
    return total

def confidence_interval(returns : Sequence[float]) -> Tuple[float, float, float]:
    values = np.asarray(returns, dtype = np.float64)
    mean = float(values.mean())
    if len(values) < 2: return mean, mean, mean
    half = 1.96 * float(values.std(ddof = 1)) / np.sqrt(len(values))
    return mean, mean - half, mean + half

def evaluate_policy(
    game : MarkovGame,
    config : ModelConfig,
    params : Params,
    episodes : int,
    seed : int,
    pool : Optional[Pool] = None
    ) -> EvalResult:
    """Greedy episode returns with a 95% normal confidence interval."""
    jobs = [
        Job('episode %d' % episode, partial(run_episode, game, config, params, seed + episode))
        for episode in range(episodes)
    ]
    returns = [ job.work() for job in jobs ] if pool is None else pool.run(jobs)
    mean, low, high = confidence_interval(returns)
    return EvalResult(returns = returns, mean = mean, ci_low = low, ci_high = high)

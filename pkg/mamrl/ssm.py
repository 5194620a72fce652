# External module dependencies
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, List
import numpy as np

# Internal module dependencies
from .errors import ConfigError, ContractError, DomainError
from .numerics import Array, Node, parameter, primitive
from . import numerics as nx

###############################################################################
# Datatypes
###############################################################################
VARIANTS = ('euler', 'zoh')
METHODS = ('sequential', 'parallel')

@dataclass
class SelectiveSsmParams:
    A_log : Node
    D : Node
    W_B : Node
    W_C : Node
    W_delta_down : Node
    W_delta_up : Node
    delta_bias : Node

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[1]

    @property
    def delta_rank(self) -> int:
        return self.W_delta_down.shape[1]

    def A(self) -> Array:
        return -np.exp(self.A_log.value)

@dataclass
class ScanStep:
    A_bar : Array
    B_bar_x : Array
    C : Array

###############################################################################
# Initialisation
###############################################################################
def uniform_fan_in(
    rng : np.random.Generator,
    fan_in : int,
    shape : Tuple[int, ...]
    ) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size = shape)

def init_ssm_params(
    rng : np.random.Generator,
    channels : int,
    state_dim : int,
    delta_rank : int,
    source_dim : Optional[int] = None,
    delta_min : float = 1e-3,
    delta_max : float = 1e-1
    ) -> SelectiveSsmParams:
    if min(channels, state_dim, delta_rank) < 1:
        raise ConfigError('SSM dimensions must be positive')
    source_dim = channels if source_dim is None else source_dim

    # S4D-real: -A spans 1..N in every channel
    A = np.tile(np.arange(1, state_dim + 1, dtype = np.float64), (channels, 1))

    # Bias so that softplus(bias) is log-uniform in [delta_min, delta_max]
    delta = np.exp(rng.uniform(
        np.log(delta_min), np.log(delta_max), size = channels
    ))
    delta_bias = delta + np.log(-np.expm1(-delta))

    return SelectiveSsmParams(
        A_log = parameter(np.log(A)),
        D = parameter(np.ones(channels)),
        W_B = parameter(uniform_fan_in(rng, channels, (channels, state_dim))),
        W_C = parameter(uniform_fan_in(rng, source_dim, (source_dim, state_dim))),
        W_delta_down = parameter(
            uniform_fan_in(rng, channels, (channels, delta_rank))
        ),
        W_delta_up = parameter(
            uniform_fan_in(rng, delta_rank, (delta_rank, channels))
        ),
        delta_bias = parameter(delta_bias)
    )

###############################################################################
# Discretisation
###############################################################################
SERIES_THRESHOLD = 1e-4

def _phi(z : Array) -> Array:
    """(exp(z) - 1) / z, with its series below the threshold."""
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(safe) / safe)

def _phi_grad(z : Array) -> Array:
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, exact)

def _check_delta(delta : Array):
    if np.any(delta <= 0):
        raise DomainError('Step size delta must be strictly positive')

def discretize_zoh(A : Array, B : Array, delta : Array) -> Tuple[Array, Array]:
    A, B, delta = np.asarray(A), np.asarray(B), np.asarray(delta)
    _check_delta(delta)
    z = delta * A
    return np.exp(z), _phi(z) * delta * B

def discretize_euler_b(B : Array, delta : Array) -> Array:
    B, delta = np.asarray(B), np.asarray(delta)
    _check_delta(delta)
    return delta * B

def _check_variant(variant : str):
    if variant in VARIANTS: return
    raise ConfigError('Unknown discretization variant \"%s\"' % variant)

###############################################################################
# Selective parameters
###############################################################################
def selective_parameters(
    x : Array,
    params : SelectiveSsmParams,
    source : Optional[Array] = None
    ) -> Tuple[Array, Array, Array]:
    if x.shape[-1] != params.W_B.shape[0]:
        raise ContractError('Token size %d does not match W_B input %d' % (
            x.shape[-1], params.W_B.shape[0]
        ))
    source = x if source is None else source
    B = x @ params.W_B.value
    C = source @ params.W_C.value
    low_rank = (x @ params.W_delta_down.value) @ params.W_delta_up.value
    delta = nx._softplus(low_rank + params.delta_bias.value)
    return B, C, delta

###############################################################################
# Scans over explicit steps
###############################################################################
def scan_steps(
    u : Array,
    delta : Array,
    A : Array,
    B : Array,
    C : Array,
    variant : str = 'euler'
    ) -> List[ScanStep]:
    _check_variant(variant)
    result : List[ScanStep] = list()
    for t in range(u.shape[0]):
        d = delta[t][..., None]
        if variant == 'zoh':
            A_bar, B_bar = discretize_zoh(A, B[t][..., None, :], d)
        else:
            A_bar = np.exp(d * A)
            B_bar = discretize_euler_b(B[t][..., None, :], d)
        result.append(ScanStep(
            A_bar = A_bar,
            B_bar_x = B_bar * u[t][..., None],
            C = C[t]
        ))
    return result

def _check_lengths(steps : Sequence[ScanStep], x : Array):
    if len(steps) == len(x) and len(steps) != 0: return
    raise ContractError('Scan length mismatch: %d steps, %d inputs' % (
        len(steps), len(x)
    ))

def _readout(h : Array, C : Array, x : Array, D : Array) -> Array:
    return (h * C[..., None, :]).sum(axis = -1) + D * x

def scan_sequential(steps : Sequence[ScanStep], x : Array, D : Array) -> Array:
    _check_lengths(steps, x)
    h = np.zeros_like(steps[0].A_bar)
    result : List[Array] = list()
    for step, x_t in zip(steps, x):
        h = step.A_bar * h + step.B_bar_x
        result.append(_readout(h, step.C, x_t, D))
    return np.stack(result)

Pair = Tuple[Array, Array]

def combine(later : Pair, earlier : Pair) -> Pair:
    a2, b2 = later
    a1, b1 = earlier
    return a2 * a1, a2 * b1 + b2

def _prefix(a : Array, b : Array) -> Pair:
    # Balanced tree over the leading axis
    length = a.shape[0]
    if length == 1: return a, b
    middle = length // 2
    left_a, left_b = _prefix(a[:middle], b[:middle])
    right_a, right_b = _prefix(a[middle:], b[middle:])
    right_a, right_b = combine((right_a, right_b), (left_a[-1], left_b[-1]))
    return (
        np.concatenate([left_a, right_a]),
        np.concatenate([left_b, right_b])
    )

def scan_parallel(steps : Sequence[ScanStep], x : Array, D : Array) -> Array:
    _check_lengths(steps, x)
    _, h = _prefix(
        np.stack([ step.A_bar for step in steps ]),
        np.stack([ step.B_bar_x for step in steps ])
    )
    C = np.stack([ step.C for step in steps ])
    return _readout(h, C, np.asarray(x), D)

###############################################################################
# Implicit attention
###############################################################################
def implicit_attention_matrix(
    x : Array,
    params : SelectiveSsmParams,
    variant : str = 'euler',
    source : Optional[Array] = None
    ) -> Array:
    """Per-channel L x L matrices M[e] with M[e, i, j] =
    C_i (prod_{k=j+1..i} A_bar_k) B_bar_j for j <= i and 0 above the
    diagonal; the empty product (i == j) is the identity."""
    _check_variant(variant)
    if x.ndim != 2:
        raise ContractError('Expected a (length, channels) sequence')
    length = x.shape[0]
    B, C, delta = selective_parameters(x, params, source)
    z = delta[:, :, None] * params.A()
    if variant == 'zoh': B_bar = _phi(z) * delta[:, :, None] * B[:, None, :]
    else: B_bar = delta[:, :, None] * B[:, None, :]
    total = np.cumsum(z, axis = 0)
    lower = np.tril(np.ones((length, length), dtype = bool))[:, :, None, None]
    decay = np.where(
        lower,
        np.exp(np.where(lower, total[:, None] - total[None, :], 0.0)),
        0.0
    )
    return np.einsum('in,ijen,jen->eij', C, decay, B_bar)

def apply_implicit_attention(matrix : Array, x : Array, D : Array) -> Array:
    return np.einsum('eij,je->ie', matrix, x) + D * x

###############################################################################
# Differentiable scan
###############################################################################
def selective_scan(
    u : Node,
    delta : Node,
    A : Node,
    B : Node,
    C : Node,
    D : Node,
    variant : str = 'euler',
    method : str = 'sequential'
    ) -> Node:
    """y_t = C_t h_t + D u_t with h_t = A_bar_t h_{t-1} + B_bar_t u_t over
    axis 1 of (batch, length, channels) inputs; B and C are
    (batch, length, state), A is (channels, state), D is (channels,)."""
    _check_variant(variant)
    if method not in METHODS:
        raise ConfigError('Unknown scan method \"%s\"' % method)
    if u.ndim != 3 or u.shape != delta.shape:
        raise ContractError('Scan expects matching (batch, length, channels)')
    if B.shape[:2] != u.shape[:2] or C.shape[:2] != u.shape[:2]:
        raise ContractError('Scan length mismatch between inputs and B/C')

    uv, dv, Av, Bv, Cv, Dv = u.value, delta.value, A.value, B.value, C.value, D.value
    z = dv[..., None] * Av
    a_bar = np.exp(z)
    beta = _phi(z) * dv[..., None] if variant == 'zoh' else dv[..., None]
    bx = beta * Bv[:, :, None, :] * uv[..., None]
    if method == 'parallel':
        _, hs = _prefix(np.swapaxes(a_bar, 0, 1), np.swapaxes(bx, 0, 1))
        hs = np.swapaxes(hs, 0, 1)
    else:
        hs = np.empty_like(bx)
        h = np.zeros_like(bx[:, 0])
        for t in range(uv.shape[1]):
            h = a_bar[:, t] * h + bx[:, t]
            hs[:, t] = h
    y = np.matmul(hs, Cv[..., :, None])[..., 0] + Dv * uv

    def _backward(g : Array) -> Tuple[Array, ...]:
        g_C = np.matmul(g[..., None, :], hs)[..., 0, :]
        g_D = (g * uv).sum(axis = (0, 1))
        g_u = g * Dv

        # Reverse recurrence for the state adjoint
        g_h = np.empty_like(hs)
        carry = np.zeros_like(hs[:, 0])
        for t in reversed(range(uv.shape[1])):
            carry = g[:, t, :, None] * Cv[:, t, None, :] + carry
            g_h[:, t] = carry
            carry = a_bar[:, t] * carry
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis = 1)
        g_z = g_h * h_prev * a_bar

        g_u = g_u + (g_h * beta * Bv[:, :, None, :]).sum(axis = -1)
        g_B = (g_h * beta * uv[..., None]).sum(axis = 2)
        g_beta = g_h * Bv[:, :, None, :] * uv[..., None]
        g_delta = (g_z * Av).sum(axis = -1)
        g_A = (g_z * dv[..., None]).sum(axis = (0, 1))
        if variant == 'zoh':
            g_delta = g_delta + (g_beta * a_bar).sum(axis = -1)
            g_A = g_A + (g_beta * dv[..., None] ** 2 * _phi_grad(z)).sum(axis = (0, 1))
        else:
            g_delta = g_delta + g_beta.sum(axis = -1)
        return g_u, g_delta, g_A, g_B, g_C, g_D

    return primitive(y, (u, delta, A, B, C, D), 'scan', _backward)

def ssm_step(
    h : Array,
    u_t : Array,
    delta_t : Array,
    A : Array,
    B_t : Array,
    C_t : Array,
    D : Array,
    variant : str = 'euler'
    ) -> Tuple[Array, Array]:
    z = delta_t[..., None] * A
    beta = _phi(z) * delta_t[..., None] if variant == 'zoh' else delta_t[..., None]
    h = np.exp(z) * h + beta * B_t[..., None, :] * u_t[..., None]
    y = np.matmul(h, C_t[..., :, None])[..., 0] + D * u_t
    return h, y

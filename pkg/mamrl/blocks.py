# External module dependencies
from dataclasses import dataclass
from typing import Callable, Optional, Tuple
import numpy as np

# Internal module dependencies
from .errors import ConfigError, ContractError
from .numerics import Array, Node, parameter, primitive
from .ssm import (
    SelectiveSsmParams,
    init_ssm_params,
    uniform_fan_in,
    selective_scan,
    ssm_step
)
from . import numerics as nx

###############################################################################
# Datatypes
###############################################################################
EXPAND = 2

@dataclass
class MambaBlockParams:
    W_in_x : Node
    W_in_gate : Node
    conv_kernel : Node
    conv_bias : Node
    ssm : SelectiveSsmParams
    W_out : Node
    norm_scale : Node
    norm_offset : Node

    @property
    def embed_dim(self) -> int:
        return self.W_in_x.shape[0]

    @property
    def expanded_dim(self) -> int:
        return self.W_in_x.shape[1]

    @property
    def conv_width(self) -> int:
        return self.conv_kernel.shape[1]

@dataclass
class CrossMambaParams:
    block : MambaBlockParams

@dataclass
class BlockState:
    window : Array
    h : Array

###############################################################################
# Initialisation
###############################################################################
def init_block_params(
    rng : np.random.Generator,
    embed_dim : int,
    state_dim : int,
    delta_rank : int,
    conv_width : int = 4,
    source_dim : Optional[int] = None
    ) -> MambaBlockParams:
    if conv_width < 1: raise ConfigError('Convolution width must be >= 1')
    expanded = EXPAND * embed_dim
    return MambaBlockParams(
        W_in_x = parameter(uniform_fan_in(rng, embed_dim, (embed_dim, expanded))),
        W_in_gate = parameter(uniform_fan_in(rng, embed_dim, (embed_dim, expanded))),
        conv_kernel = parameter(uniform_fan_in(rng, conv_width, (expanded, conv_width))),
        conv_bias = parameter(np.zeros(expanded)),
        ssm = init_ssm_params(rng, expanded, state_dim, delta_rank, source_dim),
        W_out = parameter(uniform_fan_in(rng, expanded, (expanded, embed_dim))),
        norm_scale = parameter(np.ones(embed_dim)),
        norm_offset = parameter(np.zeros(embed_dim))
    )

def init_cross_params(
    rng : np.random.Generator,
    embed_dim : int,
    state_dim : int,
    delta_rank : int,
    conv_width : int = 4,
    source_dim : Optional[int] = None
    ) -> CrossMambaParams:
    source_dim = embed_dim if source_dim is None else source_dim
    return CrossMambaParams(init_block_params(
        rng, embed_dim, state_dim, delta_rank, conv_width, source_dim
    ))

###############################################################################
# Causal convolution
###############################################################################
def causal_conv1d(x : Node, kernel : Node, bias : Node) -> Node:
    """Depthwise convolution where tap k of kernel[e] multiplies
    x[t - k, e]; positions before the sequence start read zeros."""
    if x.ndim != 3 or kernel.shape[0] != x.shape[-1]:
        raise ContractError('Convolution expects (batch, length, channels)')
    length = x.shape[1]
    width = kernel.shape[1]
    padded = np.concatenate([
        np.zeros((x.shape[0], width - 1, x.shape[2]), dtype = x.dtype),
        x.value
    ], axis = 1)

    def _window(k : int) -> slice:
        return slice(width - 1 - k, width - 1 - k + length)

    value = np.broadcast_to(bias.value, x.shape).copy()
    for k in range(width): value += kernel.value[:, k] * padded[:, _window(k)]

    def _backward(g : Array) -> Tuple[Array, Array, Array]:
        g_padded = np.zeros_like(padded)
        g_kernel = np.zeros_like(kernel.value)
        for k in range(width):
            g_padded[:, _window(k)] += g * kernel.value[:, k]
            g_kernel[:, k] = (g * padded[:, _window(k)]).sum(axis = (0, 1))
        return g_padded[:, width - 1:], g_kernel, g.sum(axis = (0, 1))

    return primitive(value, (x, kernel, bias), 'conv', _backward)

###############################################################################
# Modules and blocks
###############################################################################
def _batched(function : Callable[..., Node], *sequences : Node) -> Node:
    if sequences[0].ndim == 3: return function(*sequences)
    result = function(*[
        nx.reshape(sequence, (1,) + sequence.shape)
        for sequence in sequences
    ])
    return nx.reshape(result, result.shape[1:])

def mamba_module(
    x : Node,
    params : MambaBlockParams,
    source : Optional[Node] = None,
    variant : str = 'euler',
    method : str = 'sequential'
    ) -> Node:
    if x.shape[-1] != params.embed_dim:
        raise ContractError('Token size %d does not match block size %d' % (
            x.shape[-1], params.embed_dim
        ))
    ssm = params.ssm
    gate = nx.silu(x @ params.W_in_gate)
    u = nx.silu(causal_conv1d(
        x @ params.W_in_x, params.conv_kernel, params.conv_bias
    ))
    B = u @ ssm.W_B
    C = (u if source is None else source) @ ssm.W_C
    delta = nx.softplus((u @ ssm.W_delta_down) @ ssm.W_delta_up + ssm.delta_bias)
    A = -nx.exp(ssm.A_log)
    y = selective_scan(u, delta, A, B, C, ssm.D, variant, method)
    return (y * gate) @ params.W_out

def _norm(x : Node, params : MambaBlockParams) -> Node:
    return nx.layer_norm(x, params.norm_scale, params.norm_offset)

def mamba_block(
    x : Node,
    params : MambaBlockParams,
    variant : str = 'euler',
    method : str = 'sequential'
    ) -> Node:
    def _apply(x : Node) -> Node:
        return x + mamba_module(_norm(x, params), params, None, variant, method)
    return _batched(_apply, x)

def bimamba_block(
    x : Node,
    params : MambaBlockParams,
    variant : str = 'euler',
    method : str = 'sequential'
    ) -> Node:
    def _apply(x : Node) -> Node:
        z = _norm(x, params)
        forward = mamba_module(z, params, None, variant, method)
        reverse = mamba_module(nx.flip(z, 1), params, None, variant, method)
        return x + forward + nx.flip(reverse, 1)
    return _batched(_apply, x)

def crossmamba_block(
    target : Node,
    source : Node,
    params : CrossMambaParams,
    variant : str = 'euler',
    method : str = 'sequential'
    ) -> Node:
    if target.shape[:-1] != source.shape[:-1]:
        raise ContractError('Target %s and source %s lengths differ' % (
            target.shape, source.shape
        ))
    block = params.block
    def _apply(target : Node, source : Node) -> Node:
        return target + mamba_module(
            _norm(target, block), block, source, variant, method
        )
    return _batched(_apply, target, source)

###############################################################################
# Recurrent form
###############################################################################
def init_block_state(
    params : MambaBlockParams,
    batch : int,
    dtype : np.dtype = np.float64
    ) -> BlockState:
    return BlockState(
        window = np.zeros(
            (batch, params.conv_width - 1, params.expanded_dim), dtype = dtype
        ),
        h = np.zeros(
            (batch, params.expanded_dim, params.ssm.state_dim), dtype = dtype
        )
    )

def block_step(
    x_t : Array,
    params : MambaBlockParams,
    state : BlockState,
    source_t : Optional[Array] = None,
    variant : str = 'euler'
    ) -> Tuple[Array, BlockState]:
    """One token of mamba_block (or crossmamba_block when source_t is
    given) for a (batch, embed) input, carrying the conv window and the
    SSM state."""
    ssm = params.ssm
    z = nx.layer_norm_array(x_t, params.norm_scale.value, params.norm_offset.value)
    gate = nx.activate('silu', z @ params.W_in_gate.value)
    window = np.concatenate([
        state.window,
        (z @ params.W_in_x.value)[:, None, :]
    ], axis = 1)
    width = params.conv_width
    kernel = params.conv_kernel.value
    conv = np.broadcast_to(params.conv_bias.value, window[:, 0].shape).copy()
    for k in range(width): conv += kernel[:, k] * window[:, width - 1 - k]
    u = nx.activate('silu', conv)
    B = u @ ssm.W_B.value
    C = (u if source_t is None else source_t) @ ssm.W_C.value
    delta = nx.activate('softplus',
        (u @ ssm.W_delta_down.value) @ ssm.W_delta_up.value + ssm.delta_bias.value
    )
    h, y = ssm_step(state.h, u, delta, ssm.A(), B, C, ssm.D.value, variant)
    out = x_t + (y * gate) @ params.W_out.value
    return out, BlockState(window = window[:, 1:], h = h)

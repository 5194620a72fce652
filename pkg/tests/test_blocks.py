# External module dependencies
from hypothesis import given
import hypothesis.strategies as st
import numpy as np
import pytest

# Internal module dependencies
from mamrl.blocks import (
    CrossMambaParams,
    init_block_params,
    init_cross_params,
    init_block_state,
    causal_conv1d,
    mamba_module,
    mamba_block,
    bimamba_block,
    crossmamba_block,
    block_step
)
from mamrl.errors import ConfigError, ContractError
from mamrl.numerics import constant, parameter, no_grad, named_parameters, gradient_check
from mamrl.ssm import selective_scan
from mamrl import numerics as nx

from .strategies import rngs, lengths, variants

###############################################################################
# Test helpers
###############################################################################
def _zero(params):
    for _, node in named_parameters(params):
        node.value = np.zeros_like(node.value)
    return params

def _conv_batch(x, kernel, bias):
    return causal_conv1d(constant(x), constant(kernel), constant(bias)).value

def _conv(x, kernel, bias = None):
    channels = x.shape[-1]
    bias = np.zeros(channels) if bias is None else bias
    return causal_conv1d(
        constant(x[None]), constant(np.asarray(kernel, dtype = np.float64)), constant(bias)
    ).value[0]

###############################################################################
# Causal convolution
###############################################################################
def test_unit_kernel_is_identity_plus_bias():
    x = np.random.default_rng(0).normal(size = (5, 2))
    out = _conv(x, [[1.0], [1.0]], np.array([0.5, -1.0]))
    assert np.allclose(out, x + np.array([0.5, -1.0]), atol = 1e-15)

def test_shift_kernel_shifts_right():
    x = np.arange(1.0, 6.0)[:, None]
    out = _conv(x, [[0.0, 1.0]])
    assert np.array_equal(out[:, 0], [0.0, 1.0, 2.0, 3.0, 4.0])

@given(rngs(), lengths(2, 10), st.integers(1, 4))
def test_convolution_is_causal(rng, length, width):
    x = rng.normal(size = (length, 3))
    kernel = rng.normal(size = (3, width))
    base = _conv(x, kernel)
    j = int(rng.integers(0, length))
    changed = x.copy()
    changed[j] += 1.0
    assert np.array_equal(_conv(changed, kernel)[:j], base[:j])

def test_convolution_gradients():
    rng = np.random.default_rng(1)
    x = parameter(rng.normal(size = (2, 5, 3)), 'x')
    kernel = parameter(rng.normal(size = (3, 3)), 'kernel')
    bias = parameter(rng.normal(size = 3), 'bias')
    weights = constant(rng.normal(size = (2, 5, 3)))
    loss = lambda: nx.sum(causal_conv1d(x, kernel, bias) * weights)
    assert gradient_check(loss, [x, kernel, bias]).max_error <= 1e-6

def test_convolution_width_must_be_positive():
    with pytest.raises(ConfigError):
        init_block_params(np.random.default_rng(0), 4, 2, 2, 0)

###############################################################################
# Module and blocks
###############################################################################
def test_zero_weights_give_zero_module_output():
    params = _zero(init_block_params(np.random.default_rng(0), 4, 2, 2, 3))
    x = constant(np.random.default_rng(1).normal(size = (1, 6, 4)))
    assert np.array_equal(mamba_module(x, params).value, np.zeros((1, 6, 4)))

@given(rngs(), variants())
def test_residual_identity(rng, variant):
    params = init_block_params(rng, 4, 2, 2, 3)
    params.W_out.value = np.zeros_like(params.W_out.value)
    x = rng.normal(size = (6, 4))
    assert np.array_equal(mamba_block(constant(x), params, variant).value, x)
    assert np.array_equal(bimamba_block(constant(x), params, variant).value, x)

@given(rngs(), lengths(2, 8), variants())
def test_module_is_causal(rng, length, variant):
    params = init_block_params(rng, 4, 2, 2, 3)
    x = rng.normal(size = (1, length, 4))
    with no_grad():
        base = mamba_module(constant(x), params, None, variant).value
        j = int(rng.integers(1, length))
        changed = x.copy()
        changed[0, j] += rng.normal(size = 4)
        out = mamba_module(constant(changed), params, None, variant).value
    assert np.array_equal(out[0, :j], base[0, :j])

def test_module_is_a_composition_of_primitives():
    rng = np.random.default_rng(2)
    params = init_block_params(rng, 4, 3, 2, 3)
    x = rng.normal(size = (2, 5, 4))
    ssm = params.ssm
    silu = lambda v: nx.activate('silu', v)
    gate = silu(x @ params.W_in_gate.value)
    u = silu(_conv_batch(x @ params.W_in_x.value, params.conv_kernel.value, params.conv_bias.value))
    delta = nx.activate('softplus',
        (u @ ssm.W_delta_down.value) @ ssm.W_delta_up.value + ssm.delta_bias.value
    )
    y = selective_scan(
        constant(u), constant(delta), constant(ssm.A()),
        constant(u @ ssm.W_B.value), constant(u @ ssm.W_C.value), ssm.D
    ).value
    expected = (y * gate) @ params.W_out.value
    assert np.allclose(mamba_module(constant(x), params).value, expected, atol = 1e-12)

@given(rngs())
def test_bimamba_length_one(rng):
    params = init_block_params(rng, 4, 2, 2, 3)
    x = constant(rng.normal(size = (1, 4)))
    z = nx.layer_norm(x, params.norm_scale, params.norm_offset)
    single = nx.reshape(z, (1, 1, 4))
    expected = x.value + 2.0 * mamba_module(single, params).value[0]
    assert np.allclose(bimamba_block(x, params).value, expected, atol = 1e-14)

@given(rngs(), lengths(2, 8))
def test_bimamba_is_flip_equivariant(rng, length):
    params = init_block_params(rng, 4, 2, 2, 2)
    x = rng.normal(size = (length, 4))
    with no_grad():
        forward = bimamba_block(constant(x), params).value
        flipped = bimamba_block(constant(x[::-1].copy()), params).value
    assert np.allclose(flipped, forward[::-1], atol = 1e-10)

@given(rngs(), lengths(3, 8))
def test_bimamba_sees_both_sides(rng, length):
    params = init_block_params(rng, 4, 2, 2, 2)
    x = rng.normal(size = (length, 4))
    j = length // 2
    with no_grad():
        base = bimamba_block(constant(x), params).value
        changed = x.copy()
        changed[j] += 1.0
        out = bimamba_block(constant(changed), params).value
    assert np.any(out[:j] != base[:j])
    assert np.any(out[j + 1:] != base[j + 1:])

def test_block_accepts_batches():
    rng = np.random.default_rng(3)
    params = init_block_params(rng, 4, 2, 2, 2)
    x = rng.normal(size = (3, 5, 4))
    batched = mamba_block(constant(x), params).value
    for b in range(3):
        assert np.allclose(mamba_block(constant(x[b]), params).value, batched[b], atol = 1e-14)

def test_token_size_mismatch():
    params = init_block_params(np.random.default_rng(0), 4, 2, 2, 2)
    with pytest.raises(ContractError):
        mamba_block(constant(np.zeros((3, 5))), params)

###############################################################################
# Cross block
###############################################################################
@given(rngs(), lengths(2, 8), variants())
def test_cross_source_is_local(rng, length, variant):
    params = init_cross_params(rng, 4, 2, 2, 2, 3)
    target = constant(rng.normal(size = (length, 4)))
    source = rng.normal(size = (length, 3))
    j = int(rng.integers(0, length))
    with no_grad():
        base = crossmamba_block(target, constant(source), params, variant).value
        changed = source.copy()
        changed[j] += rng.normal(size = 3)
        out = crossmamba_block(target, constant(changed), params, variant).value
    others = np.arange(length) != j
    assert np.array_equal(out[others], base[others])

def test_cross_with_own_input_reduces_to_vanilla():
    rng = np.random.default_rng(4)
    cross = init_cross_params(rng, 4, 2, 2, 3, 8)
    block = cross.block
    x = constant(rng.normal(size = (1, 5, 4)))
    z = nx.layer_norm(x, block.norm_scale, block.norm_offset)
    u = nx.silu(causal_conv1d(z @ block.W_in_x, block.conv_kernel, block.conv_bias))
    vanilla = mamba_module(z, block).value
    assert np.array_equal(mamba_module(z, block, u).value, vanilla)

@given(rngs(), lengths(1, 7), variants())
def test_cross_block_fed_its_conv_output_is_the_vanilla_block(rng, length, variant):
    block = init_cross_params(rng, 4, 2, 2, 3, 8).block
    x = constant(rng.normal(size = (2, length, 4)))
    with no_grad():
        z = nx.layer_norm(x, block.norm_scale, block.norm_offset)
        u = nx.silu(causal_conv1d(z @ block.W_in_x, block.conv_kernel, block.conv_bias))
        cross = crossmamba_block(x, u, CrossMambaParams(block), variant).value
        vanilla = mamba_block(x, block, variant).value
    assert np.array_equal(cross, vanilla)

def test_cross_length_mismatch():
    params = init_cross_params(np.random.default_rng(0), 4, 2, 2, 2)
    with pytest.raises(ContractError):
        crossmamba_block(constant(np.zeros((3, 4))), constant(np.zeros((4, 4))), params)

def test_block_gradients():
    rng = np.random.default_rng(5)
    block = init_block_params(rng, 4, 2, 2, 3)
    cross = init_cross_params(rng, 4, 2, 2, 3)
    x = parameter(rng.normal(size = (2, 4, 4)), 'x')
    source = parameter(rng.normal(size = (2, 4, 4)), 'source')
    weights = constant(rng.normal(size = (2, 4, 4)))
    def _loss():
        y = bimamba_block(mamba_block(x, block), block)
        return nx.sum(crossmamba_block(y, source, cross) * weights)
    nodes = [x, source] + [ node for _, node in named_parameters([block, cross]) ]
    assert gradient_check(_loss, nodes, count = 200).max_error <= 1e-4

###############################################################################
# Recurrent form
###############################################################################
@given(rngs(), lengths(1, 8), variants(), st.booleans())
def test_block_step_unrolls_the_block(rng, length, variant, cross):
    if cross:
        params = init_cross_params(rng, 4, 2, 2, 3).block
        source = rng.normal(size = (2, length, 4))
    else:
        params = init_block_params(rng, 4, 2, 2, 3)
        source = None
    x = rng.normal(size = (2, length, 4))
    with no_grad():
        if cross:
            expected = crossmamba_block(
                constant(x), constant(source), CrossMambaParams(params), variant
            ).value
        else:
            expected = mamba_block(constant(x), params, variant).value
    state = init_block_state(params, 2)
    for t in range(length):
        y, state = block_step(
            x[:, t], params, state,
            None if source is None else source[:, t], variant
        )
        assert np.allclose(y, expected[:, t], atol = 1e-12)
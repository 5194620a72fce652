# External module dependencies
from hypothesis import given
import numpy as np
import pytest

# Internal module dependencies
from mamrl.attention import (
    init_attention,
    init_mat,
    attention,
    attention_weights,
    mat_backbone,
    mat_encode,
    mat_encode_array,
    mat_decode_parallel,
    mat_decode_autoregressive
)
from mamrl.errors import ConfigError, ContractError
from mamrl.numerics import constant, no_grad
from mamrl.model import greedy

from .strategies import rngs, lengths, small_model

###############################################################################
# Attention
###############################################################################
@given(rngs(), lengths(1, 8))
def test_weights_are_row_stochastic(rng, length):
    params = init_attention(rng, 4, 2)
    x = constant(rng.normal(size = (length, 4)))
    for mask in ['none', 'causal']:
        weights = attention_weights(x, x, params, mask)
        assert weights.shape == (1, 2, length, length)
        assert np.allclose(weights.sum(axis = -1), 1.0, atol = 1e-12)
    upper = np.triu(np.ones((length, length), dtype = bool), 1)
    assert np.all(attention_weights(x, x, params, 'causal')[..., upper] == 0.0)

def test_zero_query_key_gives_uniform_attention():
    rng = np.random.default_rng(0)
    params = init_attention(rng, 4, 1)
    params.W_Q.value = np.zeros((4, 4))
    params.W_K.value = np.zeros((4, 4))
    params.W_O.value = np.eye(4)
    x = rng.normal(size = (5, 4))
    V = x @ params.W_V.value
    unmasked = attention(constant(x), constant(x), params, 'none').value
    causal = attention(constant(x), constant(x), params, 'causal').value
    assert np.allclose(unmasked, np.tile(V.mean(axis = 0), (5, 1)), atol = 1e-12)
    for i in range(5):
        assert np.allclose(causal[i], V[:i + 1].mean(axis = 0), atol = 1e-12)

def test_length_one_attention_is_projected_value():
    rng = np.random.default_rng(1)
    params = init_attention(rng, 4, 2)
    x = rng.normal(size = (1, 4))
    out = attention(constant(x), constant(x), params).value
    assert np.allclose(out, x @ params.W_V.value @ params.W_O.value, atol = 1e-12)

def test_head_count_must_divide_embedding():
    with pytest.raises(ConfigError):
        init_attention(np.random.default_rng(0), 4, 3)

def test_unknown_mask():
    params = init_attention(np.random.default_rng(0), 4, 2)
    x = constant(np.zeros((2, 4)))
    with pytest.raises(ConfigError):
        attention(x, x, params, 'sliding')

def test_empty_sequence_is_rejected():
    params = init_attention(np.random.default_rng(0), 4, 2)
    x = constant(np.zeros((0, 4)))
    with pytest.raises(ContractError):
        attention_weights(x, x, params)

###############################################################################
# Backbone
###############################################################################
@given(rngs(), lengths(1, 6))
def test_residual_only_encoder_is_identity(rng, length):
    config = small_model('attention', length)
    params = init_mat(config, int(rng.integers(0, 1000)))
    for block in params.encoder:
        for node in [block.attention.W_O, block.feed_forward.out.W, block.feed_forward.out.b]:
            node.value = np.zeros_like(node.value)
    embedded = constant(rng.normal(size = (length, 4)))
    encoded, _ = mat_backbone(embedded, embedded, params)
    assert np.array_equal(encoded.value, embedded.value)

def test_backbone_streams_must_match():
    params = init_mat(small_model('attention', 3), 0)
    with pytest.raises(ContractError):
        mat_backbone(constant(np.zeros((3, 4))), constant(np.zeros((2, 4))), params)

@given(rngs(), lengths(2, 6))
def test_decoder_is_causal_in_actions(rng, n):
    params = init_mat(small_model('attention', n), 0)
    with no_grad():
        encoded, _ = mat_encode(params, rng.normal(size = (n, 5)))
        actions = rng.integers(0, 3, size = n)
        base = mat_decode_parallel(params, encoded, actions).value
        j = int(rng.integers(0, n))
        changed = actions.copy()
        changed[j] = (changed[j] + 1) % 3
        logits = mat_decode_parallel(params, encoded, changed).value
    assert np.array_equal(logits[:j + 1], base[:j + 1])

@given(rngs(), lengths(1, 6))
def test_autoregressive_decode_matches_parallel(rng, n):
    params = init_mat(small_model('attention', n), 1)
    with no_grad():
        encoded, values = mat_encode(params, rng.normal(size = (2, n, 5)))
        actions, logits = mat_decode_autoregressive(params, encoded.value, greedy())
        parallel = mat_decode_parallel(params, encoded, actions).value
    assert values.shape == (2, n)
    assert np.array_equal(actions, np.argmax(logits, axis = -1))
    assert np.allclose(logits, parallel, atol = 1e-9)

@given(rngs(), lengths(1, 6))
def test_array_encoder_matches_recorded_encoder(rng, n):
    params = init_mat(small_model('attention', n), 2)
    obs = rng.normal(size = (2, n, 5))
    with no_grad(): encoded, values = mat_encode(params, obs)
    encoded_array, values_array = mat_encode_array(params, obs)
    assert np.allclose(encoded_array, encoded.value, atol = 1e-12)
    assert np.allclose(values_array, values.value, atol = 1e-12)
    single, single_values = mat_encode_array(params, obs[0])
    assert np.allclose(single, encoded_array[0], atol = 1e-12)
    assert np.allclose(single_values, values_array[0], atol = 1e-12)
    with pytest.raises(ContractError):
        mat_encode_array(params, np.zeros((n, 4)))

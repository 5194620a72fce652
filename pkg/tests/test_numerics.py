# External module dependencies
from hypothesis import given
import numpy as np
import pytest

# Internal module dependencies
from mamrl.errors import ConfigError, ContractError, DomainError, NonFiniteError
from mamrl.numerics import (
    Node,
    parameter,
    constant,
    no_grad,
    is_recording,
    backward,
    named_parameters,
    map_parameters,
    finite_difference_gradient,
    gradient_check,
    relative_error
)
from mamrl.layers import init_linear
from mamrl import numerics as nx

from .strategies import rngs

###############################################################################
# Test helpers
###############################################################################
def _numeric(loss, x : Node) -> np.ndarray:
    def _at(point):
        original = x.value
        x.value = point
        try:
            with no_grad(): return float(loss().value)
        finally: x.value = original
    return finite_difference_gradient(_at, x.value)

###############################################################################
# Pointwise activations
###############################################################################
def test_softplus_at_zero():
    assert np.isclose(nx.softplus(constant(0.0)).value, np.log(2.0))

def test_silu_at_zero():
    assert nx.silu(constant(0.0)).value == 0.0

def test_softplus_is_stable_for_large_inputs():
    value = nx.softplus(constant(50.0)).value
    assert np.isfinite(value)
    assert np.isclose(value, 50.0, rtol = 0.0, atol = 1e-12)

def test_unknown_activation_is_a_config_error():
    with pytest.raises(ConfigError):
        nx.pointwise('swish', constant(np.zeros(3)))
    with pytest.raises(ConfigError):
        nx.activate('swish', np.zeros(3))

def test_activation_names_cover_defaults():
    names = nx.activation_names()
    for name in ['silu', 'softplus', 'exp', 'tanh', 'sigmoid', 'gelu']:
        assert name in names

@given(rngs())
def test_activation_gradients_match_finite_differences(rng):
    x = parameter(rng.uniform(0.1, 2.0, size = (3, 4)))
    weights = rng.normal(size = (3, 4))
    for name in ['silu', 'softplus', 'exp', 'tanh', 'sigmoid', 'gelu', 'log']:
        loss = lambda: nx.sum(nx.pointwise(name, x) * constant(weights))
        analytic = backward(loss(), [x])[x]
        assert np.allclose(analytic, _numeric(loss, x), atol = 1e-6)

###############################################################################
# Layer normalisation
###############################################################################
def test_layer_norm_constant_input_is_zero():
    out = nx.layer_norm(constant([1.0, 1.0, 1.0]), constant(np.ones(3)), constant(np.zeros(3)))
    assert np.array_equal(out.value, np.zeros(3))

def test_layer_norm_unit_input_is_kept():
    out = nx.layer_norm(constant([-1.0, 1.0]), constant(np.ones(2)), constant(np.zeros(2)))
    assert np.allclose(out.value, [-1.0, 1.0], atol = 1e-5)

def test_layer_norm_affine():
    x = np.array([0.0, 2.0, 4.0])
    out = nx.layer_norm(constant(x), constant(np.full(3, 2.0)), constant(np.ones(3)))
    variance = 8.0 / 3.0
    expected = (x - 2.0) / np.sqrt(variance + nx.LAYER_NORM_EPSILON) * 2.0 + 1.0
    assert np.allclose(out.value, expected, rtol = 0.0, atol = 1e-12)

@given(rngs())
def test_layer_norm_standardises(rng):
    x = rng.normal(scale = 10.0, size = (5, 16))
    out = nx.layer_norm(constant(x), constant(np.ones(16)), constant(np.zeros(16))).value
    assert np.allclose(out.mean(axis = -1), 0.0, atol = 1e-10)
    assert np.allclose(out.var(axis = -1), 1.0, atol = 1e-3)

def test_layer_norm_array_agrees_with_node_form():
    rng = np.random.default_rng(3)
    x = rng.normal(size = (2, 6))
    scale, offset = rng.normal(size = 6), rng.normal(size = 6)
    node = nx.layer_norm(constant(x), constant(scale), constant(offset)).value
    assert np.allclose(nx.layer_norm_array(x, scale, offset), node, atol = 1e-14)

###############################################################################
# Reverse mode
###############################################################################
def test_linear_loss_gradient_is_input():
    x = np.array([1.0, -2.0, 3.0])
    w = parameter(np.array([0.5, 0.1, -0.3]))
    grads = backward(nx.sum(w * constant(x)), [w])
    assert np.array_equal(grads[w], x)

def test_softplus_loss_gradient_is_sigmoid():
    w = parameter(np.array([-1.0, 0.0, 2.0]))
    grads = backward(nx.sum(nx.softplus(w)), [w])
    assert np.allclose(grads[w], 1.0 / (1.0 + np.exp(-w.value)), atol = 1e-12)

def test_non_scalar_loss_is_a_contract_violation():
    w = parameter(np.ones(3))
    with pytest.raises(ContractError):
        backward(w * 2.0, [w])

def test_unreached_parameter_has_zero_gradient():
    w = parameter(np.ones(3))
    v = parameter(np.ones(2))
    grads = backward(nx.sum(w * w), [w, v])
    assert np.array_equal(grads[v], np.zeros(2))

def test_shared_node_accumulates_gradient():
    w = parameter(np.array([2.0]))
    y = w * w
    grads = backward(nx.sum(y + y), [w])
    assert np.allclose(grads[w], [8.0])

@given(rngs())
def test_composite_gradients_match_finite_differences(rng):
    a = parameter(rng.normal(size = (2, 3, 4)))
    b = parameter(rng.normal(size = (4, 3)))
    c = parameter(rng.normal(size = (3,)))
    index = np.array([0, 2, 2])
    def _loss():
        y = nx.matmul(a, b) + c
        y = nx.concat([nx.flip(y, 1), nx.transpose(y, (0, 2, 1))], axis = -1)
        y = nx.stack([nx.softmax(y), nx.log_softmax(y)], axis = 0)
        z = nx.reshape(y, (-1, 3))[:, index]
        return nx.mean(nx.minimum(z, nx.clip(z * 2.0, -0.5, 0.5)) / (z * z + 1.0))
    grads = backward(_loss(), [a, b, c])
    for node in [a, b, c]:
        assert np.allclose(grads[node], _numeric(_loss, node), atol = 1e-6)

def test_matmul_rank_and_shape_checks():
    with pytest.raises(ContractError):
        nx.matmul(constant(np.ones(3)), constant(np.ones((3, 2))))
    with pytest.raises(ContractError):
        nx.matmul(constant(np.ones((2, 3))), constant(np.ones((2, 2))))

def test_non_finite_result_is_reported():
    with pytest.raises(NonFiniteError):
        nx.pointwise('log', constant(np.array([-1.0])))

def test_no_grad_keeps_no_parents():
    w = parameter(np.ones(2))
    assert is_recording()
    with no_grad():
        assert not is_recording()
        y = w * 3.0
    assert is_recording()
    assert y.parents == ()
    assert (w * 3.0).parents != ()

###############################################################################
# Parameter trees
###############################################################################
def test_named_parameters_and_map():
    rng = np.random.default_rng(0)
    tree = [init_linear(rng, 3, 2), init_linear(rng, 2, 1)]
    names = [ name for name, _ in named_parameters(tree) ]
    assert names == ['0.W', '0.b', '1.W', '1.b']
    doubled = map_parameters(tree, lambda _, value: value * 2.0)
    assert [ name for name, _ in named_parameters(doubled) ] == names
    for (_, old), (name, new) in zip(named_parameters(tree), named_parameters(doubled)):
        assert new is not old
        assert new.name == name
        assert np.array_equal(new.value, old.value * 2.0)

###############################################################################
# Finite differences
###############################################################################
def test_finite_difference_of_sum_of_squares():
    gradient = finite_difference_gradient(lambda x: float(np.sum(x * x)), np.array([1.0, 2.0]))
    assert np.allclose(gradient, [2.0, 4.0], atol = 1e-8)

def test_finite_difference_of_constant_is_zero():
    gradient = finite_difference_gradient(lambda x: 3.0, np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(gradient, np.zeros(3))

def test_finite_difference_reports_nan_coordinate():
    def _f(x):
        return float('nan') if x[1] > 0.5 else float(np.sum(x))
    with pytest.raises(NonFiniteError) as info:
        finite_difference_gradient(_f, np.array([0.0, 0.5]))
    assert '(1,)' in str(info.value)

def test_finite_difference_needs_positive_step():
    with pytest.raises(DomainError):
        finite_difference_gradient(lambda x: 0.0, np.zeros(2), h = 0.0)

def test_gradient_check_restores_values_and_passes():
    rng = np.random.default_rng(1)
    w = parameter(rng.normal(size = (4, 3)), 'w')
    original = w.value.copy()
    report = gradient_check(lambda: nx.sum(nx.silu(w) * w), [w], count = 5)
    assert len(report.samples) == 5
    assert report.max_error <= 1e-6
    assert np.array_equal(w.value, original)

def test_relative_error_floor():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 1e-7) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)

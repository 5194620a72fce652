# External module dependencies
from typing import (
    Any,
    Callable,
    Iterator,
    Optional,
    Sequence,
    Tuple,
    List,
    Dict,
    Union
)
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, is_dataclass, replace
import threading
import numpy as np

# Internal module dependencies
from .errors import ConfigError, ContractError, DomainError, NonFiniteError

###############################################################################
# Datatypes
###############################################################################
Array = np.ndarray
Backward = Callable[[Array], Tuple[Optional[Array], ...]]
Operand = Union['Node', Array, float, int]

###############################################################################
# Recording mode
###############################################################################
_mode = threading.local()

def is_recording() -> bool:
    return getattr(_mode, 'recording', True)

@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_recording()
    _mode.recording = False
    try: yield
    finally: _mode.recording = previous

###############################################################################
# Classes
###############################################################################
class Node:
    """A value on the tape; parents and a local-gradient rule when recorded."""
    __slots__ = ('value', 'parents', 'rule', 'name', '_backward')
    __array_ufunc__ = None

    def __init__(self,
        value : Array,
        parents : Tuple['Node', ...] = (),
        rule : str = 'constant',
        backward : Optional[Backward] = None,
        name : Optional[str] = None
        ):
        self.value = value
        self.parents = parents
        self.rule = rule
        self.name = name
        self._backward = backward

    def __hash__(self):
        return hash(id(self))

    def __repr__(self):
        return 'Node(%s, shape=%s, rule=%s)' % (
            self.name if self.name else '_', self.shape, self.rule
        )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def __add__(self, other : Operand) -> 'Node': return add(self, other)
    def __radd__(self, other : Operand) -> 'Node': return add(other, self)
    def __sub__(self, other : Operand) -> 'Node': return sub(self, other)
    def __rsub__(self, other : Operand) -> 'Node': return sub(other, self)
    def __mul__(self, other : Operand) -> 'Node': return mul(self, other)
    def __rmul__(self, other : Operand) -> 'Node': return mul(other, self)
    def __truediv__(self, other : Operand) -> 'Node': return div(self, other)
    def __rtruediv__(self, other : Operand) -> 'Node': return div(other, self)
    def __matmul__(self, other : Operand) -> 'Node': return matmul(self, other)
    def __neg__(self) -> 'Node': return neg(self)
    def __getitem__(self, index : Any) -> 'Node': return getitem(self, index)

###############################################################################
# Leaf constructors
###############################################################################
def parameter(value : Array, name : Optional[str] = None) -> Node:
    return Node(np.asarray(value), rule = 'parameter', name = name)

def constant(value : Any, dtype : Any = None) -> Node:
    return Node(np.asarray(value, dtype = dtype), rule = 'constant')

def lift(value : Operand, dtype : Any = None) -> Node:
    if isinstance(value, Node): return value
    return constant(value, dtype)

###############################################################################
# Parameter trees
###############################################################################
def named_parameters(tree : Any, prefix : str = '') -> List[Tuple[str, Node]]:
    def _join(name : str) -> str:
        return name if prefix == '' else '%s.%s' % (prefix, name)
    if isinstance(tree, Node): return [(prefix, tree)]
    result : List[Tuple[str, Node]] = list()
    if is_dataclass(tree):
        for item in fields(tree):
            result += named_parameters(getattr(tree, item.name), _join(item.name))
    elif isinstance(tree, (list, tuple)):
        for index, item in enumerate(tree):
            result += named_parameters(item, _join(str(index)))
    return result

def assign_names(tree : Any) -> Any:
    for name, node in named_parameters(tree): node.name = name
    return tree

def map_parameters(tree : Any, function : Callable[[str, Array], Array]) -> Any:
    """Copy of a parameter tree with every leaf value replaced by
    function(dotted_name, value)."""
    def _map(tree : Any, prefix : str) -> Any:
        def _join(name : str) -> str:
            return name if prefix == '' else '%s.%s' % (prefix, name)
        if isinstance(tree, Node):
            return parameter(function(prefix, tree.value), prefix)
        if is_dataclass(tree):
            return replace(tree, **{
                item.name : _map(getattr(tree, item.name), _join(item.name))
                for item in fields(tree)
            })
        if isinstance(tree, list):
            return [ _map(item, _join(str(index))) for index, item in enumerate(tree) ]
        return tree
    return _map(tree, '')

def _pair(a : Operand, b : Operand) -> Tuple[Node, Node]:
    if isinstance(a, Node): return a, lift(b, a.dtype)
    if isinstance(b, Node): return lift(a, b.dtype), b
    return lift(a), lift(b)

###############################################################################
# Primitive plumbing
###############################################################################
def primitive(
    value : Array,
    parents : Sequence[Node],
    rule : str,
    backward : Backward
    ) -> Node:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError('Operation %s produced non-finite values' % rule)
    if not is_recording(): return Node(value, rule = rule)
    return Node(value, tuple(parents), rule, backward)

def _unbroadcast(grad : Array, shape : Tuple[int, ...]) -> Array:
    if grad.shape == shape: return grad
    while grad.ndim > len(shape): grad = grad.sum(axis = 0)
    for axis, size in enumerate(shape):
        if size != 1 or grad.shape[axis] == 1: continue
        grad = grad.sum(axis = axis, keepdims = True)
    return grad

###############################################################################
# Elementwise arithmetic
###############################################################################
def add(a : Operand, b : Operand) -> Node:
    a, b = _pair(a, b)
    return primitive(a.value + b.value, (a, b), 'add', lambda g: (
        _unbroadcast(g, a.shape),
        _unbroadcast(g, b.shape)
    ))

def sub(a : Operand, b : Operand) -> Node:
    a, b = _pair(a, b)
    return primitive(a.value - b.value, (a, b), 'sub', lambda g: (
        _unbroadcast(g, a.shape),
        _unbroadcast(-g, b.shape)
    ))

def mul(a : Operand, b : Operand) -> Node:
    a, b = _pair(a, b)
    return primitive(a.value * b.value, (a, b), 'mul', lambda g: (
        _unbroadcast(g * b.value, a.shape),
        _unbroadcast(g * a.value, b.shape)
    ))

def div(a : Operand, b : Operand) -> Node:
    a, b = _pair(a, b)
    return primitive(a.value / b.value, (a, b), 'div', lambda g: (
        _unbroadcast(g / b.value, a.shape),
        _unbroadcast(-g * a.value / (b.value * b.value), b.shape)
    ))

def neg(x : Node) -> Node:
    return primitive(-x.value, (x,), 'neg', lambda g: (-g,))

def minimum(a : Operand, b : Operand) -> Node:
    a, b = _pair(a, b)
    mask = a.value <= b.value
    return primitive(np.where(mask, a.value, b.value), (a, b), 'minimum',
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape)
        )
    )

def clip(x : Node, low : float, high : float) -> Node:
    mask = (x.value >= low) & (x.value <= high)
    return primitive(np.clip(x.value, low, high), (x,), 'clip',
        lambda g: (np.where(mask, g, 0.0),)
    )

###############################################################################
# Pointwise activations
###############################################################################
_GELU_C = np.sqrt(2.0 / np.pi)

def _sigmoid(x : Array) -> Array:
    return 0.5 * (1.0 + np.tanh(0.5 * x))

def _softplus(x : Array) -> Array:
    # Stable branch above 20
    high = x + np.log1p(np.exp(-np.maximum(x, 20.0)))
    low = np.log1p(np.exp(np.minimum(x, 20.0)))
    return np.where(x > 20.0, high, low)

def _gelu(x : Array) -> Array:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))

def _gelu_grad(x : Array, y : Array) -> Array:
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * dt

def _silu_grad(x : Array, y : Array) -> Array:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))

Activation = Tuple[Callable[[Array], Array], Callable[[Array, Array], Array]]
_ACTIVATIONS : Dict[str, Activation] = {
    'silu': (lambda x: x * _sigmoid(x), _silu_grad),
    'softplus': (_softplus, lambda x, y: _sigmoid(x)),
    'exp': (np.exp, lambda x, y: y),
    'tanh': (np.tanh, lambda x, y: 1.0 - y * y),
    'sigmoid': (_sigmoid, lambda x, y: y * (1.0 - y)),
    'gelu': (_gelu, _gelu_grad),
    'log': (np.log, lambda x, y: 1.0 / x),
    'relu': (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0) * 1.0)
}

def activation_names() -> List[str]:
    return sorted(_ACTIVATIONS.keys())

def pointwise(name : str, x : Node) -> Node:
    if name not in _ACTIVATIONS:
        raise ConfigError('Unknown activation \"%s\"' % name)
    forward, derivative = _ACTIVATIONS[name]
    value = forward(x.value)
    return primitive(value, (x,), name,
        lambda g: (g * derivative(x.value, value),)
    )

def activate(name : str, x : Array) -> Array:
    if name not in _ACTIVATIONS:
        raise ConfigError('Unknown activation \"%s\"' % name)
    return _ACTIVATIONS[name][0](x)

def silu(x : Node) -> Node: return pointwise('silu', x)
def softplus(x : Node) -> Node: return pointwise('softplus', x)
def exp(x : Node) -> Node: return pointwise('exp', x)
def gelu(x : Node) -> Node: return pointwise('gelu', x)

###############################################################################
# Linear algebra and shape
###############################################################################
def matmul(a : Operand, b : Operand) -> Node:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError('matmul expects operands of rank >= 2')
    if a.shape[-1] != b.shape[-2]:
        raise ContractError('matmul shape mismatch %s @ %s' % (
            a.shape, b.shape
        ))
    return primitive(a.value @ b.value, (a, b), 'matmul', lambda g: (
        _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape),
        _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
    ))

def transpose(x : Node, axes : Sequence[int]) -> Node:
    inverse = np.argsort(axes)
    return primitive(np.transpose(x.value, axes), (x,), 'transpose',
        lambda g: (np.transpose(g, inverse),)
    )

def reshape(x : Node, shape : Sequence[int]) -> Node:
    return primitive(np.reshape(x.value, shape), (x,), 'reshape',
        lambda g: (np.reshape(g, x.shape),)
    )

def _is_basic_index(index : Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    for part in parts:
        if isinstance(part, (np.ndarray, list)): return False
    return True

def getitem(x : Node, index : Any) -> Node:
    basic = _is_basic_index(index)
    def _backward(g : Array) -> Tuple[Array]:
        result = np.zeros_like(x.value)
        if basic: result[index] = g
        else: np.add.at(result, index, g)
        return (result,)
    return primitive(x.value[index], (x,), 'slice', _backward)

def concat(nodes : Sequence[Node], axis : int = -1) -> Node:
    sizes = [ node.shape[axis] for node in nodes ]
    splits = np.cumsum(sizes)[:-1]
    return primitive(
        np.concatenate([ node.value for node in nodes ], axis = axis),
        nodes, 'concat',
        lambda g: tuple(np.split(g, splits, axis = axis))
    )

def stack(nodes : Sequence[Node], axis : int = 0) -> Node:
    return primitive(
        np.stack([ node.value for node in nodes ], axis = axis),
        nodes, 'stack',
        lambda g: tuple(
            np.take(g, index, axis = axis)
            for index in range(len(nodes))
        )
    )

def flip(x : Node, axis : int) -> Node:
    return primitive(np.flip(x.value, axis), (x,), 'flip',
        lambda g: (np.flip(g, axis),)
    )

###############################################################################
# Reductions
###############################################################################
def sum(x : Node, axis : Optional[int] = None, keepdims : bool = False) -> Node:
    def _backward(g : Array) -> Tuple[Array]:
        if axis is not None and not keepdims: g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)
    return primitive(
        np.sum(x.value, axis = axis, keepdims = keepdims),
        (x,), 'sum', _backward
    )

def mean(x : Node, axis : Optional[int] = None, keepdims : bool = False) -> Node:
    count = x.value.size if axis is None else x.shape[axis]
    return sum(x, axis, keepdims) * (1.0 / count)

###############################################################################
# Normalisation and softmax
###############################################################################
LAYER_NORM_EPSILON = 1e-5

def layer_norm(
    x : Node,
    scale : Node,
    offset : Node,
    epsilon : float = LAYER_NORM_EPSILON
    ) -> Node:
    if scale.shape[-1] != x.shape[-1] or offset.shape[-1] != x.shape[-1]:
        raise ContractError('layer_norm feature size mismatch')
    centered = x.value - x.value.mean(axis = -1, keepdims = True)
    variance = (centered * centered).mean(axis = -1, keepdims = True)
    inverse = 1.0 / np.sqrt(variance + epsilon)
    normed = centered * inverse

    def _backward(g : Array) -> Tuple[Array, Array, Array]:
        g_normed = g * scale.value
        g_x = inverse * (
            g_normed
            - g_normed.mean(axis = -1, keepdims = True)
            - normed * (g_normed * normed).mean(axis = -1, keepdims = True)
        )
        return (
            g_x,
            _unbroadcast(g * normed, scale.shape),
            _unbroadcast(g, offset.shape)
        )

    return primitive(
        normed * scale.value + offset.value,
        (x, scale, offset), 'layer_norm', _backward
    )

def layer_norm_array(
    x : Array,
    scale : Array,
    offset : Array,
    epsilon : float = LAYER_NORM_EPSILON
    ) -> Array:
    centered = x - x.mean(axis = -1, keepdims = True)
    variance = (centered * centered).mean(axis = -1, keepdims = True)
    return centered / np.sqrt(variance + epsilon) * scale + offset

def softmax(x : Node, axis : int = -1) -> Node:
    shifted = x.value - x.value.max(axis = axis, keepdims = True)
    e = np.exp(shifted)
    s = e / e.sum(axis = axis, keepdims = True)
    return primitive(s, (x,), 'softmax', lambda g: (
        s * (g - (g * s).sum(axis = axis, keepdims = True)),
    ))

def log_softmax(x : Node, axis : int = -1) -> Node:
    shifted = x.value - x.value.max(axis = axis, keepdims = True)
    result = shifted - np.log(np.exp(shifted).sum(axis = axis, keepdims = True))
    return primitive(result, (x,), 'log_softmax', lambda g: (
        g - np.exp(result) * g.sum(axis = axis, keepdims = True),
    ))

###############################################################################
# Reverse mode
###############################################################################
def _topological_order(root : Node) -> List[Node]:
    result : List[Node] = list()
    visited : set = set()
    stack : List[Tuple[Node, bool]] = [(root, False)]
    while len(stack) != 0:
        node, expanded = stack.pop()
        if expanded: result.append(node); continue
        if id(node) in visited: continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) in visited: continue
            stack.append((parent, False))
    return result

Gradients = Dict[Node, Array]

def backward(loss : Node, wrt : Sequence[Node] = ()) -> Gradients:
    if loss.value.size != 1:
        raise ContractError('Loss must be scalar, got shape %s' % (
            loss.shape,
        ))
    keep = { id(node) for node in wrt }
    grads : Dict[int, Array] = { id(loss): np.ones_like(loss.value) }
    for node in reversed(_topological_order(loss)):
        grad = grads.get(id(node))
        if grad is None or node._backward is None: continue
        if id(node) not in keep: del grads[id(node)]
        for parent, parent_grad in zip(node.parents, node._backward(grad)):
            if parent_grad is None: continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad
    return {
        node : (
            np.array(grads[id(node)], dtype = node.dtype)
            if id(node) in grads else
            np.zeros_like(node.value)
        )
        for node in wrt
    }

###############################################################################
# Finite differences
###############################################################################
def finite_difference_gradient(
    f : Callable[[Array], float],
    x : Array,
    h : float = 1e-5
    ) -> Array:
    if h <= 0: raise DomainError('Step size must be positive, got %g' % h)
    point = np.array(x, dtype = np.float64)
    result = np.zeros_like(point)
    for index in np.ndindex(point.shape):
        original = point[index]
        point[index] = original + h
        upper = float(f(point.copy()))
        point[index] = original - h
        lower = float(f(point.copy()))
        point[index] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NonFiniteError(
                'Function returned a non-finite value at coordinate %s' % (
                index,
            ))
        result[index] = (upper - lower) / (2.0 * h)
    return result

@dataclass
class GradientSample:
    name : str
    index : Tuple[int, ...]
    analytic : float
    numeric : float
    error : float

@dataclass
class GradientReport:
    samples : List[GradientSample] = field(default_factory = list)

    @property
    def max_error(self) -> float:
        if len(self.samples) == 0: return 0.0
        return max(sample.error for sample in self.samples)

RELATIVE_FLOOR = 1e-3

def relative_error(analytic : float, numeric : float) -> float:
    scale = max(abs(analytic), abs(numeric), RELATIVE_FLOOR)
    return abs(analytic - numeric) / scale

def gradient_check(
    loss_fn : Callable[[], Node],
    params : Sequence[Node],
    count : int = 200,
    seed : int = 0,
    h : float = 1e-5
    ) -> GradientReport:
    """Compare reverse-mode gradients against central differences on a
    random sample of parameter coordinates. Parameter values are swapped
    for perturbed copies and restored afterwards."""
    analytic = backward(loss_fn(), params)
    coordinates = [
        (position, index)
        for position, param in enumerate(params)
        for index in np.ndindex(param.shape)
    ]
    rng = np.random.default_rng(seed)
    if len(coordinates) > count:
        picks = rng.choice(len(coordinates), size = count, replace = False)
        coordinates = [ coordinates[pick] for pick in sorted(picks) ]

    def _evaluate(param : Node, index : Tuple[int, ...], delta : float) -> float:
        original = param.value
        perturbed = original.copy()
        perturbed[index] += delta
        param.value = perturbed
        try:
            with no_grad(): return float(loss_fn().value)
        finally: param.value = original

    report = GradientReport()
    for position, index in coordinates:
        param = params[position]
        upper = _evaluate(param, index, h)
        lower = _evaluate(param, index, -h)
        numeric = (upper - lower) / (2.0 * h)
        value = float(analytic[param][index])
        report.samples.append(GradientSample(
            name = param.name if param.name else 'param%d' % position,
            index = index,
            analytic = value,
            numeric = numeric,
            error = relative_error(value, numeric)
        ))
    return report

"""Reverse-mode differentiation over float64 numpy arrays.

Every primitive returns a new Tensor. When any input requires a gradient the
output remembers its parents and a backward rule; ``backward`` orders those
records into a ComputationTape and walks it once in reverse.

Leading batch axes are accepted by matmul, conv1d_k1, softmax and layer_norm
with the weights shared over the batch. No other broadcasting is done.
"""
import numpy as np

from triplet_diarization.exceptions import ShapeMismatchException

LAYER_NORM_EPSILON = 1e-5


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.op = None
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return "Tensor(shape={}, op={}, requires_grad={})".format(self.shape, self.op, self.requires_grad)

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values, name=None):
    return Tensor(values, requires_grad=True, name=name)


def _result(values, parents, backward_rule, op):
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward_rule
    return out


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatchException("{}: shape mismatch {} vs {}".format(op, a.shape, b.shape))


def _reduce_to_shape(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


class ComputationTape:
    """Tensors reachable from a root, parents before children"""

    def __init__(self, nodes):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_loss(cls, loss):
        order = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into .grad of every leaf that requires it

    Gradients add to whatever is already stored; call zero_grad between steps.
    """
    if loss.values.size != 1:
        raise ShapeMismatchException("backward needs a scalar loss, got shape {}".format(loss.shape))
    if tape is None:
        tape = ComputationTape.from_loss(loss)

    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        grad = grads.pop(id(node), None)
        if grad is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad
    return tape


def add(a, b):
    _check_same_shape(a, b, 'add')
    return _result(a.values + b.values, (a, b), lambda g: (g, g), 'add')


def sub(a, b):
    _check_same_shape(a, b, 'sub')
    return _result(a.values - b.values, (a, b), lambda g: (g, -g), 'sub')


def mul(a, b):
    _check_same_shape(a, b, 'mul')
    return _result(a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values), 'mul')


def scale(a, factor):
    factor = float(factor)
    return _result(a.values * factor, (a,), lambda g: (g * factor,), 'scale')


def add_scalar(a, constant):
    return _result(a.values + float(constant), (a,), lambda g: (g,), 'add_scalar')


def add_bias(x, bias):
    if bias.values.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeMismatchException("add_bias: shape mismatch {} vs {}".format(x.shape, bias.shape))

    def rule(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _result(x.values + bias.values, (x, bias), rule, 'add_bias')


def matmul(a, b):
    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchException("matmul: shape mismatch {} vs {}".format(a.shape, b.shape))
    if a.values.ndim > 2 and b.values.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchException("matmul: batch shape mismatch {} vs {}".format(a.shape, b.shape))

    def rule(g):
        grad_a = np.matmul(g, np.swapaxes(b.values, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _reduce_to_shape(grad_a, a.shape), _reduce_to_shape(grad_b, b.shape)

    return _result(np.matmul(a.values, b.values), (a, b), rule, 'matmul')


def transpose(a):
    return _result(np.swapaxes(a.values, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), 'transpose')


def softmax(x, axis=-1):
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), rule, 'softmax')


def relu(x):
    mask = x.values > 0
    return _result(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), 'relu')


def conv1d_k1(x, weight, bias):
    """Kernel-size-1 convolution over time: the same affine map at every step"""
    if weight.values.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatchException("conv1d_k1: input {} does not match weight {}".format(x.shape, weight.shape))
    return add_bias(matmul(x, weight), bias)


def sum_all(x):
    return _result(np.array(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), 'sum')


def mean_all(x):
    count = x.values.size
    return _result(np.array(x.values.mean()), (x,), lambda g: (np.full(x.shape, g / count),), 'mean_all')


def mean(x, axis):
    count = x.shape[axis]

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).copy(),)

    return _result(x.values.mean(axis=axis), (x,), rule, 'mean')


def concat(tensors, axis=-1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    boundaries = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return _result(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), rule, 'concat')


def take_rows(table, indices):
    """Row lookup table[indices]; gradients of repeated rows add up"""
    indices = np.asarray(indices, dtype=np.intp)

    def rule(g):
        grad = np.zeros_like(table.values)
        np.add.at(grad, indices, g)
        return (grad,)

    return _result(table.values[indices], (table,), rule, 'take_rows')


def sq_l2_distance(a, b):
    """Squared Euclidean distance along the last axis"""
    _check_same_shape(a, b, 'sq_l2_distance')
    diff = a.values - b.values

    def rule(g):
        grad = 2.0 * diff * np.expand_dims(g, -1)
        return grad, -grad

    return _result((diff ** 2).sum(axis=-1), (a, b), rule, 'sq_l2_distance')


def layer_norm(x, gain, bias, epsilon=LAYER_NORM_EPSILON):
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeMismatchException("layer_norm: width {} vs gain {} / bias {}".format(width, gain.shape, bias.shape))

    centered = x.values - x.values.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + epsilon)
    normalized = centered * inv_std

    def rule(g):
        grad_normalized = g * gain.values
        grad_x = inv_std * (grad_normalized
                            - grad_normalized.mean(axis=-1, keepdims=True)
                            - normalized * (grad_normalized * normalized).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, width)
        return grad_x, (flat_g * normalized.reshape(-1, width)).sum(axis=0), flat_g.sum(axis=0)

    return _result(normalized * gain.values + bias.values, (x, gain, bias), rule, 'layer_norm')


def numerical_gradient(loss_fn, tensor, step=1e-5):
    """Central finite differences of a scalar loss_fn() w.r.t. tensor.values"""
    grad = np.zeros_like(tensor.values)
    flat_values = tensor.values.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_values.size):
        original = flat_values[i]
        flat_values[i] = original + step
        upper = loss_fn()
        flat_values[i] = original - step
        lower = loss_fn()
        flat_values[i] = original
        flat_grad[i] = (upper - lower) / (2.0 * step)
    return grad

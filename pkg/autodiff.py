#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Minimal reverse-mode automatic differentiation over dense float64 numpy arrays

A ``Tensor`` records the operation that produced it and references to its parents; calling ``backward`` on a scalar
result walks the recorded tape in reverse topological order and accumulates gradients into every leaf that
requires them. The tape is rebuilt on every forward pass.

Examples
--------
Example usage::

    import autodiff as ad
    x = ad.Parameter([3.0])
    loss = ad.sum(x * x)
    ad.backward(loss)
    x.grad
    # array([6.])
"""
import logging
logger = logging.getLogger("autodiff")
logger.debug("loading autodiff module")

import numpy as np
from scipy.special import erf

from tools import DimensionError, ContractError, NumericError, DegenerateMaskError

# ~~~~ GLOBALS ~~~~~~ #
_grad_state = {'enabled': True}
_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ~~~~ CUSTOM CLASSES ~~~~~~ #
class no_grad(object):
    """
    Context manager that disables tape recording; tensors created inside carry no parents

    with no_grad():
        features = model_forward(...)
    """
    def __enter__(self):
        self.previous = _grad_state['enabled']
        _grad_state['enabled'] = False
        return(self)
    def __exit__(self, type, value, traceback):
        _grad_state['enabled'] = self.previous
        return(False)


class Tensor(object):
    """
    Dense n-dimensional value node of a differentiable compute graph

    Parameters
    ----------
    data: array-like
        values; stored as a C-ordered float64 numpy array
    requires_grad: bool
        whether gradients should be accumulated for this node

    Attributes
    ----------
    grad: numpy.ndarray or None
        accumulated gradient, same shape as ``data``
    op: str
        name of the operation that produced the tensor, ``None`` for leaves
    """
    __array_priority__ = 1000

    def __init__(self, data, requires_grad = False, name = None):
        self.data = np.ascontiguousarray(data, dtype = np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return(self.data.shape)

    @property
    def ndim(self):
        return(self.data.ndim)

    @property
    def size(self):
        return(self.data.size)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def item(self):
        return(float(self.data.reshape(-1)[0]))

    def numpy(self):
        return(self.data)

    def detach(self):
        return(Tensor(self.data.copy()))

    def __repr__(self):
        return('Tensor(shape={0}, op={1}, requires_grad={2})'.format(self.shape, self.op, self.requires_grad))

    def __add__(self, other): return(add(self, other))
    def __radd__(self, other): return(add(other, self))
    def __sub__(self, other): return(sub(self, other))
    def __rsub__(self, other): return(sub(other, self))
    def __mul__(self, other): return(mul(self, other))
    def __rmul__(self, other): return(mul(other, self))
    def __truediv__(self, other): return(div(self, other))
    def __rtruediv__(self, other): return(div(other, self))
    def __neg__(self): return(neg(self))
    def __pow__(self, exponent): return(power(self, exponent))
    def __matmul__(self, other): return(matmul(self, other))
    def __getitem__(self, key): return(getitem(self, key))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return(reshape(self, shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return(transpose(self, axes if axes else None))

    def sum(self, axis = None, keepdims = False):
        return(sum(self, axis = axis, keepdims = keepdims))

    def mean(self, axis = None, keepdims = False):
        return(mean(self, axis = axis, keepdims = keepdims))


class Parameter(Tensor):
    """
    A learnable leaf tensor; its gradient accumulator starts at zero
    """
    def __init__(self, data, name = None):
        Tensor.__init__(self, data, requires_grad = True, name = name)
        self.grad = np.zeros_like(self.data)


# ~~~~ TAPE ~~~~~~ #
def as_tensor(x):
    """
    Wrap a constant (number or array) in a Tensor that does not require gradients
    """
    if isinstance(x, Tensor):
        return(x)
    return(Tensor(x))

def _make(data, parents, backward_fn, op):
    """
    Build the output node of an operation, recording the tape entry only when a parent requires gradients
    """
    out = Tensor(data)
    if _grad_state['enabled'] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return(out)

def unbroadcast(grad, shape):
    """
    Sum out broadcast dimensions so that ``grad`` matches ``shape``
    """
    if grad.shape == shape:
        return(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis = 0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis = dim, keepdims = True)
    return(grad)

def topological_order(root):
    """
    Return the nodes reachable from ``root`` (through parents requiring gradients) with every parent listed before its children
    """
    order = []
    visited = set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return(order)

def backward(loss):
    """
    Back-propagate from a scalar tensor, accumulating ``dloss/dleaf`` into the ``grad`` of every leaf that requires it

    Parameters
    ----------
    loss: Tensor
        a tensor holding exactly one value

    Notes
    -----
    Leaf gradients accumulate across calls; callers zero them between optimizer steps.
    Intermediate gradients are held only for the duration of the call.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError('backward requires a scalar tensor')
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = unbroadcast(np.asarray(pg, dtype = np.float64), parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ~~~~ ELEMENTWISE OPS ~~~~~~ #
def _check_broadcast(a, b, op):
    try:
        return(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise DimensionError('{0}: shapes {1} and {2} do not broadcast'.format(op, a.shape, b.shape))

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'add')
    return(_make(a.data + b.data, (a, b), lambda g: (g, g), 'add'))

def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'sub')
    return(_make(a.data - b.data, (a, b), lambda g: (g, -g), 'sub'))

def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'mul')
    return(_make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), 'mul'))

def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'div')
    out = a.data / b.data
    return(_make(out, (a, b), lambda g: (g / b.data, -g * out / b.data), 'div'))

def neg(a):
    a = as_tensor(a)
    return(_make(-a.data, (a,), lambda g: (-g,), 'neg'))

def power(a, exponent):
    """
    Elementwise ``a ** exponent`` for a constant scalar exponent
    """
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data ** exponent
    return(_make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), 'pow'))

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return(_make(out, (a,), lambda g: (g * out,), 'exp'))

def log(a):
    a = as_tensor(a)
    return(_make(np.log(a.data), (a,), lambda g: (g / a.data,), 'log'))

def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return(_make(out, (a,), lambda g: (g * 0.5 / out,), 'sqrt'))

def gelu(a):
    """
    Exact GELU, ``x * Phi(x)`` with the standard normal CDF ``Phi``
    """
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return(_make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), 'gelu'))


# ~~~~ LINEAR ALGEBRA ~~~~~~ #
def matmul(a, b):
    """
    Matrix product over the last two axes, batched over any leading axes

    Parameters
    ----------
    a: Tensor
        shape ``[..., r, k]``
    b: Tensor
        shape ``[..., k, c]``

    Returns
    -------
    Tensor
        shape ``[..., r, c]``

    Examples
    --------
    Example usage::

        matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data
        # array([[11.]])
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError('matmul: operands must have at least 2 dimensions, got {0} and {1}'.format(a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError('matmul: inner dimensions differ, {0} and {1}'.format(a.shape, b.shape))
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError('matmul: batch dimensions do not broadcast, {0} and {1}'.format(a.shape, b.shape))
    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return(ga, gb)
    return(_make(out, (a, b), _backward, 'matmul'))


# ~~~~ SHAPE OPS ~~~~~~ #
def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError('reshape: cannot reshape {0} to {1}'.format(a.shape, shape))
    return(_make(out, (a,), lambda g: (g.reshape(a.shape),), 'reshape'))

def transpose(a, axes = None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError('transpose: axes {0} invalid for shape {1}'.format(axes, a.shape))
    inverse = tuple(np.argsort(axes))
    return(_make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), 'transpose'))

def concat(tensors, axis = 0):
    """
    Concatenate tensors along an existing axis
    """
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis = axis)
    except (ValueError, IndexError) as e:
        raise DimensionError('concat: {0}'.format(e))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def _backward(g):
        return(tuple(np.split(g, splits, axis = axis)))
    return(_make(out, tuple(tensors), _backward, 'concat'))

def gather(a, indices, axis = 0):
    """
    Select entries of ``a`` along ``axis`` using a 1-D integer index list (``numpy.take``); repeated indices are allowed
    """
    a = as_tensor(a)
    indices = np.asarray(indices, dtype = np.int64)
    if indices.ndim != 1:
        raise DimensionError('gather: indices must be 1-D')
    if axis < -a.ndim or axis >= a.ndim:
        raise DimensionError('gather: axis {0} invalid for shape {1}'.format(axis, a.shape))
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise DimensionError('gather: index out of range for axis of size {0}'.format(a.shape[axis]))
    out = np.take(a.data, indices, axis = axis)
    def _backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
        return((ga,))
    return(_make(out, (a,), _backward, 'gather'))

def take_along_axis(a, indices, axis):
    """
    ``numpy.take_along_axis`` with broadcasting of ``indices`` over the non-indexed axes
    """
    a = as_tensor(a)
    indices = np.asarray(indices, dtype = np.int64)
    if indices.ndim != a.ndim:
        raise DimensionError('take_along_axis: indices must have {0} dimensions'.format(a.ndim))
    try:
        out = np.take_along_axis(a.data, indices, axis = axis)
    except (ValueError, IndexError) as e:
        raise DimensionError('take_along_axis: {0}'.format(e))
    def _backward(g):
        ga = np.zeros_like(a.data)
        full = np.broadcast_to(indices, g.shape)
        index = list(np.ix_(*[np.arange(s) for s in g.shape]))
        index[axis] = full
        np.add.at(ga, tuple(index), g)
        return((ga,))
    return(_make(out, (a,), _backward, 'take_along_axis'))

def getitem(a, key):
    a = as_tensor(a)
    out = a.data[key]
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)
    def _backward(g):
        ga = np.zeros_like(a.data)
        if basic:
            # basic indexing selects each element at most once
            ga[key] += g
        else:
            np.add.at(ga, key, g)
        return((ga,))
    return(_make(np.array(out, dtype = np.float64), (a,), _backward, 'getitem'))


# ~~~~ REDUCTIONS ~~~~~~ #
def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return(np.broadcast_to(g, shape))
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return(np.broadcast_to(g, shape))

def sum(a, axis = None, keepdims = False):
    a = as_tensor(a)
    try:
        out = np.sum(a.data, axis = axis, keepdims = keepdims)
    except (ValueError, IndexError) as e:
        raise DimensionError('sum: {0}'.format(e))
    return(_make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), 'sum'))

def mean(a, axis = None, keepdims = False):
    a = as_tensor(a)
    try:
        out = np.mean(a.data, axis = axis, keepdims = keepdims)
    except (ValueError, IndexError) as e:
        raise DimensionError('mean: {0}'.format(e))
    count = a.data.size / max(out.size, 1)
    return(_make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,), 'mean'))


# ~~~~ NORMALIZATION & PROBABILITY ~~~~~~ #
def _valid_axis(a, axis, op):
    if axis < -a.ndim or axis >= a.ndim:
        raise DimensionError('{0}: axis {1} invalid for shape {2}'.format(op, axis, a.shape))

def softmax(a, axis = -1):
    """
    Softmax along ``axis``; the per-slice maximum is subtracted before exponentiation

    Examples
    --------
    Example usage::

        softmax(Tensor([1000., 1000.])).data
        # array([0.5, 0.5])
    """
    a = as_tensor(a)
    _valid_axis(a, axis, 'softmax')
    shifted = a.data - np.max(a.data, axis = axis, keepdims = True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis = axis, keepdims = True)
    def _backward(g):
        return((out * (g - np.sum(g * out, axis = axis, keepdims = True)),))
    return(_make(out, (a,), _backward, 'softmax'))

def log_softmax(a, axis = -1):
    a = as_tensor(a)
    _valid_axis(a, axis, 'log_softmax')
    shifted = a.data - np.max(a.data, axis = axis, keepdims = True)
    lse = np.log(np.sum(np.exp(shifted), axis = axis, keepdims = True))
    out = shifted - lse
    def _backward(g):
        return((g - np.exp(out) * np.sum(g, axis = axis, keepdims = True),))
    return(_make(out, (a,), _backward, 'log_softmax'))

def layer_norm(x, gamma, beta, eps = 1e-5):
    """
    Layer normalization over the last axis, ``gamma * (x - mean) / sqrt(var + eps) + beta``
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ContractError('layer_norm: eps must be positive')
    n = x.shape[-1]
    if gamma.shape[-1:] != (n,) or beta.shape[-1:] != (n,):
        raise DimensionError('layer_norm: gamma/beta must have last dimension {0}'.format(n))
    mu = np.mean(x.data, axis = -1, keepdims = True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis = -1, keepdims = True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    def _backward(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - np.sum(dxhat, axis = -1, keepdims = True) - xhat * np.sum(dxhat * xhat, axis = -1, keepdims = True))
        return(dx, g * xhat, g)
    return(_make(out, (x, gamma, beta), _backward, 'layer_norm'))


# ~~~~ LOSSES ~~~~~~ #
def mse_masked(pred, target, mask):
    """
    Mean squared error over the elements selected by a binary mask

    Parameters
    ----------
    pred: Tensor
        predictions
    target: Tensor or numpy.ndarray
        targets, broadcast-compatible with ``pred``
    mask: numpy.ndarray
        0/1 values broadcast-compatible with ``pred``; 1 marks an element that contributes

    Returns
    -------
    Tensor
        scalar ``sum(mask * (pred - target)**2) / sum(mask)``, the mask counted after broadcasting

    Examples
    --------
    Example usage::

        mse_masked(Tensor([1., 2.]), Tensor([0., 0.]), np.array([1., 0.])).item()
        # 1.0
    """
    pred, target = as_tensor(pred), as_tensor(target)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype = np.float64)
    try:
        shape = np.broadcast_shapes(pred.shape, target.shape, mask.shape)
    except ValueError:
        raise DimensionError('mse_masked: shapes {0}, {1}, {2} do not broadcast'.format(pred.shape, target.shape, mask.shape))
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError('mse_masked: mask values must be 0 or 1')
    full_mask = np.broadcast_to(mask, shape)
    count = float(np.sum(full_mask))
    if count == 0:
        raise DegenerateMaskError('mse_masked: mask selects no elements')
    diff = pred.data - target.data
    out = np.sum(full_mask * diff * diff) / count
    def _backward(g):
        grad = 2.0 * g * full_mask * diff / count
        return(grad, -grad)
    return(_make(np.array(out), (pred, target), _backward, 'mse_masked'))

def cross_entropy(logits, labels):
    """
    Mean softmax cross-entropy of ``logits [N, C]`` against integer ``labels [N]``
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype = np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError('cross_entropy: expected logits [N, C] and labels [N], got {0} and {1}'.format(logits.shape, labels.shape))
    n = logits.shape[0]
    shifted = logits.data - np.max(logits.data, axis = 1, keepdims = True)
    logp = shifted - np.log(np.sum(np.exp(shifted), axis = 1, keepdims = True))
    out = -np.mean(logp[np.arange(n), labels])
    def _backward(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return((g * probs / n,))
    return(_make(np.array(out), (logits,), _backward, 'cross_entropy'))


# ~~~~ OPTIMIZER ~~~~~~ #
class AdamWState(object):
    """
    Per-parameter first/second moment estimates, step counter and hyperparameters for AdamW
    """
    def __init__(self, params, lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0):
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay

    def digest(self):
        """
        Return a short text digest of the optimizer state (step counter and moment norms)
        """
        m_norm = float(np.sqrt(np.sum([np.sum(m * m) for m in self.m]))) if self.m else 0.0
        v_norm = float(np.sqrt(np.sum([np.sum(v * v) for v in self.v]))) if self.v else 0.0
        return('step={0};m={1:.6e};v={2:.6e}'.format(self.step, m_norm, v_norm))

def adamw_step(params, grads, state):
    """
    Apply one AdamW update in place: decoupled weight decay, then the bias-corrected Adam step

    Parameters
    ----------
    params: list
        Parameters to update; must be in the same order as ``state.params``
    grads: list
        numpy arrays holding the gradient of each parameter
    state: AdamWState
        moments and hyperparameters; updated in place

    Raises
    ------
    NumericError
        a gradient holds NaN or inf; no parameter is modified
    """
    if state.lr <= 0:
        raise ContractError('adamw_step: lr must be positive')
    if len(params) != len(state.m):
        raise ContractError('adamw_step: optimizer state holds {0} parameters, got {1}'.format(len(state.m), len(params)))
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError('adamw_step: gradient/state shape mismatch for parameter {0}'.format(p.name))
        if not np.all(np.isfinite(g)):
            raise NumericError('adamw_step: non-finite gradient for parameter {0}'.format(p.name), step = state.step)
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p.data *= (1.0 - state.lr * state.weight_decay)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)

class AdamW(object):
    """
    Convenience wrapper pairing a parameter list with its AdamWState

    Examples
    --------
    Example usage::

        opt = AdamW(params, lr = 1e-3, betas = (0.9, 0.95), weight_decay = 0.05)
        opt.zero_grad()
        backward(loss)
        opt.step()
    """
    def __init__(self, params, lr = 1e-3, betas = (0.9, 0.999), eps = 1e-8, weight_decay = 0.0):
        self.params = list(params)
        self.state = AdamWState(self.params, lr = lr, beta1 = betas[0], beta2 = betas[1], eps = eps, weight_decay = weight_decay)

    @property
    def lr(self):
        return(self.state.lr)

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state)


# ~~~~ GRADIENT ORACLE ~~~~~~ #
def grad_check(fn, params, eps = 1e-6, floor = 1e-8, max_coords = None, seed = 0):
    """
    Compare analytic gradients with central finite differences

    Parameters
    ----------
    fn: callable
        takes no arguments and returns a scalar Tensor computed from ``params``
    params: list
        the Parameters to check
    eps: float
        finite difference step, in ``[1e-7, 1e-3]``
    floor: float
        absolute floor of the relative-error denominator
    max_coords: int
        check at most this many randomly chosen coordinates per parameter; ``None`` checks all
    seed: int
        seed of the coordinate sampler

    Returns
    -------
    float
        the worst relative error ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError('grad_check: eps must lie in [1e-7, 1e-3]')
    for p in params:
        p.zero_grad()
    loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError('grad_check: function returned a non-finite value')
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size = max_coords, replace = False))
        for i in coords:
            original = flat[i]
            with no_grad():
                flat[i] = original + eps
                f_plus = fn().item()
                flat[i] = original - eps
                f_minus = fn().item()
            flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError('grad_check: function returned a non-finite value')
            numeric = (f_plus - f_minus) / (2.0 * eps)
            exact = a.reshape(-1)[i]
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, rel)
    logger.debug('grad_check over {0} parameters: max rel error {1:.3e}'.format(len(params), worst))
    return(worst)

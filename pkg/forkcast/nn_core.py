"""Differentiable building blocks over channels-last grid tensors.

Every block takes ``(H, W, C)`` tensors and a parameter scope, so the same
functions serve the model, the gradient checker and the tests. Gradients
come from torch autograd; ``grad_check`` compares them with central finite
differences.
"""
import logging
import math
import zlib
from collections import OrderedDict, namedtuple
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from forkcast import gridworld
from forkcast.errors import (ArgumentError, ConfigError, GradCheckError,
                             NumericError, ShapeError)

logger = logging.getLogger(__name__)

FORGET_BIAS = 1.0
LAYER_KINDS = ('dense', 'conv2d', 'convrnn_cell', 'gat', 'spatial_softmax',
               'embed')


def as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None or x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float32)


def require_finite(x, what):
    if not bool(torch.isfinite(x).all()):
        raise NumericError('%s contains non-finite values' % what)
    return x


def _check_shape(what, x, expected):
    got = tuple(x.shape)
    if len(got) != len(expected) or any(
            e is not None and e != g for e, g in zip(expected, got)):
        raise ShapeError(what, tuple('?' if e is None else e
                                     for e in expected), got)


class ParameterStore(object):
    """Named trainable arrays.

    Shapes are fixed at creation. Initial values depend only on the global
    seed and the entry name, never on creation order.
    """

    def __init__(self, seed=0, dtype=torch.float32):
        self.seed = int(seed)
        self.dtype = dtype
        self._entries = OrderedDict()
        self._trainable = {}

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError('no parameter named %r' % name)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return list(self._entries.items())

    def shapes(self):
        return OrderedDict((k, tuple(v.shape))
                           for k, v in self._entries.items())

    def is_trainable(self, name):
        return self._trainable[name]

    def trainable(self):
        return [(k, v) for k, v in self._entries.items()
                if self._trainable[k]]

    def parameters(self):
        return [v for _, v in self.trainable()]

    def scope(self, prefix):
        return Scope(self, prefix)

    def _generator(self, name):
        g = torch.Generator()
        g.manual_seed((self.seed * 1000003 +
                       zlib.crc32(name.encode('utf-8'))) % (2 ** 63))
        return g

    def create(self, name, shape, init='glorot', value=0.0, trainable=True,
               fan=None):
        """Adds an entry.

        Args:
          name: unique entry name.
          shape: tuple of positive ints.
          init: 'glorot' (uniform, fan-in/fan-out balanced), 'constant'
              or 'zeros'.
          value: fill value for 'constant'.
          trainable: whether the optimizer and weight decay see the entry.
          fan: (fan_in, fan_out) override for 'glorot'.
        """
        if name in self._entries:
            raise ConfigError('duplicate parameter name %r' % name)
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ConfigError('parameter %r has non-positive shape %s' %
                              (name, shape))
        if init == 'glorot':
            fan_in, fan_out = fan or _fans(shape)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = (torch.rand(shape, generator=self._generator(name),
                               dtype=torch.float64) * 2 - 1) * bound
        elif init == 'constant':
            data = torch.full(shape, float(value), dtype=torch.float64)
        elif init == 'zeros':
            data = torch.zeros(shape, dtype=torch.float64)
        else:
            raise ConfigError('unknown initializer %r' % init)
        param = torch.nn.Parameter(data.to(self.dtype),
                                   requires_grad=trainable)
        self._entries[name] = param
        self._trainable[name] = bool(trainable)
        return param

    def set_array(self, name, array):
        param = self[name]
        array = np.asarray(array)
        if tuple(array.shape) != tuple(param.shape):
            raise ShapeError('parameter %s' % name, param.shape, array.shape)
        if not np.all(np.isfinite(array)):
            raise NumericError('parameter %s has non-finite values' % name)
        with torch.no_grad():
            param.copy_(torch.as_tensor(array, dtype=param.dtype))

    def to_arrays(self):
        return OrderedDict((k, v.detach().cpu().numpy().copy())
                           for k, v in self._entries.items())

    def to(self, dtype):
        """Deep copy of the store with every entry cast to ``dtype``."""
        other = ParameterStore(self.seed, dtype)
        for name, value in self._entries.items():
            trainable = self._trainable[name]
            other._entries[name] = torch.nn.Parameter(
                value.detach().clone().to(dtype), requires_grad=trainable)
            other._trainable[name] = trainable
        return other

    def copy(self):
        return self.to(self.dtype)

    def sum_of_squares(self):
        terms = [torch.sum(p * p) for p in self.parameters()]
        if not terms:
            return torch.zeros((), dtype=self.dtype)
        return torch.stack(terms).sum()

    def all_finite(self):
        return all(bool(torch.isfinite(v).all())
                   for v in self._entries.values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _fans(shape):
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    # conv weight (out, in, k, k)
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


class Scope(object):
    """Read-only view of the entries sharing a name prefix."""

    def __init__(self, store, prefix):
        self.store = store
        self.prefix = prefix.rstrip('/')

    def __getitem__(self, key):
        return self.store[self.prefix + '/' + key]

    def __contains__(self, key):
        return (self.prefix + '/' + key) in self.store

    def child(self, name):
        return Scope(self.store, self.prefix + '/' + name)


@dataclass(frozen=True)
class LayerSpec(object):
    kind: str
    c_in: int = 1
    c_out: int = 1
    kernel: int = 1
    activation: Optional[str] = None
    hidden: Optional[int] = None
    form: str = 'additive'

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError('unknown layer kind %r' % self.kind)
        if self.c_in <= 0 or self.c_out <= 0:
            raise ConfigError('%s layer needs positive channel counts, got '
                              '%d -> %d' % (self.kind, self.c_in, self.c_out))
        if self.kernel % 2 != 1:
            raise ConfigError('%s kernel must be odd, got %d' %
                              (self.kind, self.kernel))

    def build(self, store, prefix):
        """Creates this layer's entries under ``prefix`` in ``store``."""
        if self.kind == 'dense':
            store.create(prefix + '/weight', (self.c_in, self.c_out))
            store.create(prefix + '/bias', (self.c_out,), init='zeros')
        elif self.kind == 'conv2d':
            store.create(prefix + '/weight',
                         (self.c_out, self.c_in, self.kernel, self.kernel))
            store.create(prefix + '/bias', (self.c_out,), init='zeros')
        elif self.kind == 'convrnn_cell':
            d = self.c_out
            store.create(prefix + '/weight',
                         (4 * d, self.c_in + d, self.kernel, self.kernel))
            bias = store.create(prefix + '/bias', (4 * d,), init='zeros')
            with torch.no_grad():
                bias[d:2 * d] = FORGET_BIAS
        elif self.kind == 'gat':
            # c_in is the node width [h_i, S_i]; c_out the hidden width d.
            hidden = self.hidden or self.c_out
            out = self.c_out if self.form == 'additive' else 1
            store.create(prefix + '/w1', (2 * self.c_in, hidden))
            store.create(prefix + '/b1', (hidden,), init='zeros')
            store.create(prefix + '/w2', (hidden, out))
            store.create(prefix + '/b2', (out,), init='zeros')
        elif self.kind == 'embed':
            store.create(prefix + '/weight', (self.c_out,), fan=(1, self.c_out))
            store.create(prefix + '/bias', (self.c_out,), init='zeros')
        return store.scope(prefix)


def dense(x, params, activation=None):
    w, b = params['weight'], params['bias']
    if x.shape[-1] != w.shape[0]:
        raise ShapeError('dense input', tuple(x.shape[:-1]) + (w.shape[0],),
                         x.shape)
    return _activate(x @ w + b, activation)


def _activate(x, activation):
    if activation is None:
        return x
    if activation == 'tanh':
        return torch.tanh(x)
    if activation == 'sigmoid':
        return torch.sigmoid(x)
    if activation == 'relu':
        return torch.relu(x)
    raise ConfigError('unknown activation %r' % activation)


def conv2d(x, weight, bias):
    """Same-padded, stride-1 cross-correlation of an (H, W, C_in) tensor.

    ``weight`` has torch layout (C_out, C_in, k, k).
    """
    if x.dim() != 3:
        raise ShapeError('conv2d input', ('H', 'W', weight.shape[1]), x.shape)
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3] or \
            weight.shape[2] % 2 != 1:
        raise ShapeError('conv2d weight', ('C_out', x.shape[-1], 'k', 'k'),
                         weight.shape)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError('conv2d input channels',
                         tuple(x.shape[:2]) + (weight.shape[1],), x.shape)
    if bias.shape != (weight.shape[0],):
        raise ShapeError('conv2d bias', (weight.shape[0],), bias.shape)
    y = F.conv2d(x.permute(2, 0, 1).unsqueeze(0), weight, bias,
                 padding=weight.shape[2] // 2)
    return y.squeeze(0).permute(1, 2, 0)


def convrnn_step(x, h_prev, c_prev, params):
    """One ConvLSTM update (no peepholes).

    Gates i, f, o, g come from one convolution over ``[x, h_prev]``;
    ``c = f * c_prev + i * g`` and ``h = o * tanh(c)``.
    """
    require_finite(x, 'convrnn input')
    weight, bias = params['weight'], params['bias']
    d = weight.shape[0] // 4
    _check_shape('convrnn hidden state', h_prev, (x.shape[0], x.shape[1], d))
    _check_shape('convrnn cell state', c_prev, (x.shape[0], x.shape[1], d))
    gates = conv2d(torch.cat([x, h_prev], dim=-1), weight, bias)
    i, f, o, g = torch.split(gates, d, dim=-1)
    c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return h, c


def _edge_mlp(pairs, params):
    hidden = torch.tanh(pairs @ params['w1'] + params['b1'])
    return hidden @ params['w2'] + params['b2']


def gat_layer(hidden, node_context, params, form='additive'):
    """Graph update over the 8-connected grid graph with a residual.

    With ``form='additive'`` the output at cell i is
    ``h_i + mean_{j in N(i)} f_e([v_i, v_j])`` where ``v = [h, S]`` and f_e
    is a one-hidden-layer tanh perceptron. ``form='attention'`` instead
    weighs each neighbor state by a scalar f_e score:
    ``h_i + mean_j f_e([v_i, v_j]) * h_j``. An empty neighborhood sums to 0.
    """
    if hidden.dim() != 3 or node_context.dim() != 3 or \
            hidden.shape[:2] != node_context.shape[:2]:
        raise ShapeError('gat node context',
                         tuple(hidden.shape[:2]) + ('C_s',),
                         node_context.shape)
    rows, cols, d = hidden.shape
    width = d + node_context.shape[-1]
    if params['w1'].shape[0] != 2 * width:
        raise ShapeError('gat edge weights', (2 * width, 'hidden'),
                         params['w1'].shape)
    index, mask = gridworld.neighbor_table(rows, cols)
    index = torch.as_tensor(np.where(mask, index, 0))
    mask_t = torch.as_tensor(mask, dtype=hidden.dtype).unsqueeze(-1)
    nodes = torch.cat([hidden, node_context], dim=-1).reshape(rows * cols,
                                                              width)
    neighbors = nodes[index]
    centers = nodes.unsqueeze(1).expand_as(neighbors)
    edges = _edge_mlp(torch.cat([centers, neighbors], dim=-1), params)
    if form == 'attention':
        h_flat = hidden.reshape(rows * cols, d)
        edges = edges * h_flat[index]
    elif form != 'additive':
        raise ConfigError('unknown gat form %r' % form)
    degree = torch.as_tensor(mask.sum(axis=1).clip(min=1),
                             dtype=hidden.dtype).unsqueeze(-1)
    message = (edges * mask_t).sum(dim=1) / degree
    return hidden + message.reshape(rows, cols, d)


def spatial_softmax(logits):
    """Softmax over all cells of an (H, W) map."""
    if bool(torch.isnan(logits).any()):
        raise NumericError('spatial_softmax input contains NaN')
    rows, cols = logits.shape
    return torch.softmax(logits.reshape(-1), dim=0).reshape(rows, cols)


def log_spatial_softmax(logits):
    rows, cols = logits.shape
    return torch.log_softmax(logits.reshape(-1), dim=0).reshape(rows, cols)


def embed_belief(belief, params):
    """Per-cell affine map from a probability to a d_e vector."""
    w, b = params['weight'], params['bias']
    if belief.dim() != 2:
        raise ShapeError('belief', ('H', 'W'), belief.shape)
    return belief.unsqueeze(-1) * w + b


def avg_pool(x, factor):
    """Average-pools an (H, W, C) tensor by ``factor`` on both axes."""
    if factor == 1:
        return x
    y = F.avg_pool2d(x.permute(2, 0, 1).unsqueeze(0), factor)
    return y.squeeze(0).permute(1, 2, 0)


GradCheckReport = namedtuple('GradCheckReport',
                             'max_rel_error passed worst checked tolerance')


def grad_check(fragment, store, inputs=(), tolerance=1e-4, eps=1e-5,
               fraction=1.0, floor=1e-3, seed=0):
    """Compares autograd gradients with central finite differences.

    The check runs on a float64 copy of ``store``; the original is left
    untouched.

    Args:
      fragment: callable ``fragment(store, *inputs)`` returning a scalar
          tensor.
      store: the ParameterStore whose trainable entries are checked.
      inputs: extra positional arguments for ``fragment``.
      tolerance: pass threshold on the max relative error.
      eps: finite-difference step.
      fraction: share of elements sampled per entry (at least one each).
      floor: lower bound of the relative-error denominator, so that
          vanishing gradients are compared absolutely.
      seed: sampling seed.
    Returns:
      GradCheckReport(max_rel_error, passed, worst, checked, tolerance).
    Raises:
      GradCheckError: the fragment gives different losses for equal input.
    """
    store = store.to(torch.float64)
    inputs = tuple(x.to(torch.float64) if isinstance(x, torch.Tensor) and
                   x.is_floating_point() else x for x in inputs)

    def evaluate():
        with torch.no_grad():
            loss = fragment(store, *inputs)
        return float(loss)

    first, second = evaluate(), evaluate()
    if first != second:
        raise GradCheckError('fragment is not deterministic: %r != %r' %
                             (first, second))
    store.zero_grad()
    loss = fragment(store, *inputs)
    if loss.dim() != 0:
        raise ArgumentError('fragment must return a scalar, got shape %s' %
                            (tuple(loss.shape),))
    loss.backward()
    rng = np.random.default_rng(seed)
    worst, worst_err, checked = None, 0.0, 0
    for name, param in store.trainable():
        grad = param.grad
        analytic = (np.zeros(param.shape) if grad is None else
                    grad.detach().numpy())
        flat = param.data.view(-1)
        count = flat.numel()
        if fraction >= 1.0:
            picks = range(count)
        else:
            n = max(1, int(round(fraction * count)))
            picks = sorted(rng.choice(count, size=n, replace=False))
        for k in picks:
            original = flat[k].item()
            flat[k] = original + eps
            plus = evaluate()
            flat[k] = original - eps
            minus = evaluate()
            flat[k] = original
            numeric = (plus - minus) / (2 * eps)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, '%s[%d]' % (name, k)
    passed = worst_err < tolerance
    logger.debug('grad_check max_rel_error=%.3g worst=%s checked=%d',
                 worst_err, worst, checked)
    return GradCheckReport(worst_err, passed, worst, checked, tolerance)

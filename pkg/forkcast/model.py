"""History encoder, coarse belief decoder and fine offset decoder.

One encoder runs at the fine grid. Each configured scale owns a belief
decoder and an offset decoder; coarser scales start from the 2x2 (or
larger) average-pooled encoder state.
"""
import logging
from collections import namedtuple

import numpy as np
import torch

from forkcast import gridworld, nn_core, scenegen
from forkcast.config import ModelConfig
from forkcast.errors import ArgumentError, NumericError, ShapeError
from forkcast.nn_core import LayerSpec, ParameterStore

logger = logging.getLogger(__name__)

EncoderState = namedtuple('EncoderState', 'hidden cell s_bar')
DecoderState = namedtuple('DecoderState', 'hidden cell')
ScaleRollout = namedtuple('ScaleRollout', 'grid beliefs offsets')

BELIEF_TOL = 1e-6


def validate_belief(probs, tol=BELIEF_TOL):
    """Raises NumericError unless ``probs`` is a distribution over cells."""
    total = float(probs.sum())
    if not bool(torch.isfinite(probs).all()) or bool((probs < 0).any()) or \
            abs(total - 1.0) > tol:
        raise NumericError('belief is not normalized (sum=%r)' % total)
    return probs


def scale_prefix(index):
    return 'scale%d' % index


def build_parameters(config, store):
    """Creates every entry the configured model reads."""
    d, k = config.d_enc, config.k_classes
    LayerSpec('conv2d', k, d, config.kernel).build(store, 'encoder/semantic')
    LayerSpec('convrnn_cell', d, d, config.kernel).build(store, 'encoder/cell')
    for n, _ in enumerate(config.active_scales()):
        prefix = scale_prefix(n)
        if config.use_gat:
            LayerSpec('gat', d + k, d, form=config.gat_form).build(
                store, prefix + '/belief/gat')
        LayerSpec('embed', 1, config.d_e).build(store, prefix + '/belief/embed')
        LayerSpec('convrnn_cell', config.d_e, d, config.kernel).build(
            store, prefix + '/belief/cell')
        LayerSpec('conv2d', d, 1, config.kernel).build(
            store, prefix + '/belief/head')
        if not config.use_fine_decoder:
            continue
        if config.use_gat:
            LayerSpec('gat', d + k, d, form=config.gat_form).build(
                store, prefix + '/offset/gat')
        LayerSpec('convrnn_cell', 2, d, config.kernel).build(
            store, prefix + '/offset/cell')
        LayerSpec('dense', d, config.d_e, activation='tanh').build(
            store, prefix + '/offset/head1')
        LayerSpec('dense', config.d_e, 2).build(store, prefix + '/offset/head2')
    return store


class Model(object):
    """A parameter store plus the configuration that shaped it."""

    def __init__(self, config=None, store=None, seed=0, dtype=torch.float32):
        self.config = config or ModelConfig()
        self.config.validate()
        if store is None:
            store = build_parameters(self.config, ParameterStore(seed, dtype))
        self.store = store

    @property
    def dtype(self):
        return self.store.dtype

    def to(self, dtype):
        return Model(self.config, self.store.to(dtype))

    def scope(self, prefix):
        return self.store.scope(prefix)

    def scale_grids(self, grid):
        """GridSpecs of every active scale for a scenario's fine grid."""
        scales = self.config.active_scales()
        if tuple(grid.shape) != tuple(scales[0]):
            raise ShapeError('scenario grid', tuple(scales[0]), grid.shape)
        grids = [grid]
        for n, (rows, cols) in enumerate(scales[1:], 1):
            grids.append(grid.rescaled(rows, cols, scale_id=n))
        return grids

    def pool_factor(self, n):
        return self.config.active_scales()[0][0] // \
            self.config.active_scales()[n][0]

    def encode(self, scenario, strict=False):
        return encode_history(scenario, self, strict=strict)

    def rollout(self, scenario, steps, encoder_state=None, strict=False):
        return rollout(scenario, self, steps, encoder_state, strict=strict)


def _tensor(x, model):
    return torch.as_tensor(np.asarray(x), dtype=model.dtype)


def semantic_frames(scenario, config):
    """One-hot frames of the last ``config.h`` history steps and their
    temporal average, as float64 arrays."""
    if scenario.h < config.h:
        raise ShapeError('history frames of %s' % scenario.scenario_id,
                         (config.h,), (scenario.h,))
    frames = [scenegen.one_hot_semantic(m)
              for m in scenario.frame_maps()[-config.h:]]
    if frames[0].shape[-1] != config.k_classes:
        raise ShapeError('semantic classes', (config.k_classes,),
                         (frames[0].shape[-1],))
    return frames, scenegen.temporal_average(frames)


def encode_history(scenario, model, strict=False):
    """Runs the ConvLSTM encoder over the observed history.

    The input at step t is the one-hot location map multiplied into a
    convolution of the one-hot semantic frame.
    """
    config = model.config
    grid = model.scale_grids(scenario.grid)[0]
    frames, s_bar = semantic_frames(scenario, config)
    counter = gridworld.BoundsCounter()
    cells = gridworld.quantize_points(grid,
                                      scenario.history_array()[-config.h:],
                                      strict=strict, counter=counter)
    counter.report('history of %s' % scenario.scenario_id)
    sem = model.scope('encoder/semantic')
    cell_params = model.scope('encoder/cell')
    shape = grid.shape + (config.d_enc,)
    h = torch.zeros(shape, dtype=model.dtype)
    c = torch.zeros(shape, dtype=model.dtype)
    for t, idx in enumerate(cells):
        loc = torch.zeros(grid.shape + (1,), dtype=model.dtype)
        loc.view(-1)[int(idx)] = 1.0
        features = nn_core.conv2d(_tensor(frames[t], model), sem['weight'],
                                  sem['bias'])
        h, c = nn_core.convrnn_step(loc * features, h, c, cell_params)
    return EncoderState(h, c, _tensor(s_bar, model))


def _graph(hidden, s_bar, scope, use_gat, form):
    if not use_gat:
        return hidden
    return nn_core.gat_layer(hidden, s_bar, scope.child('gat'), form)


def coarse_step(prev_state, prev_belief, s_bar, scope, use_gat=True,
                form='additive'):
    """One belief decoder step.

    Returns:
      (DecoderState, belief) with ``belief = softmax(conv(H_t))``.
    """
    hidden = _graph(prev_state.hidden, s_bar, scope, use_gat, form)
    x = nn_core.embed_belief(prev_belief, scope.child('embed'))
    h, c = nn_core.convrnn_step(x, hidden, prev_state.cell,
                                scope.child('cell'))
    head = scope.child('head')
    logits = nn_core.conv2d(h, head['weight'], head['bias'])[..., 0]
    belief = nn_core.spatial_softmax(logits)
    return DecoderState(h, c), belief


def offset_head(h, scope):
    hidden = nn_core.dense(h, scope.child('head1'), activation='tanh')
    return nn_core.dense(hidden, scope.child('head2'))


def fine_step(prev_state, prev_offsets, s_bar, scope, use_gat=True,
              form='additive'):
    """One offset decoder step; offsets come from a per-cell perceptron."""
    hidden = _graph(prev_state.hidden, s_bar, scope, use_gat, form)
    h, c = nn_core.convrnn_step(prev_offsets, hidden, prev_state.cell,
                                scope.child('cell'))
    return DecoderState(h, c), offset_head(h, scope)


class ScaleDecoder(object):
    """Decoder pair of one scale, initialized from the encoder state."""

    def __init__(self, model, encoder_state, index, grid, last_point):
        self.model = model
        self.index = index
        self.grid = grid
        factor = model.pool_factor(index)
        self.s_bar = nn_core.avg_pool(encoder_state.s_bar, factor)
        self.initial = DecoderState(
            nn_core.avg_pool(encoder_state.hidden, factor),
            nn_core.avg_pool(encoder_state.cell, factor))
        self.last_cell = gridworld.quantize_point(grid, last_point)
        prefix = scale_prefix(index)
        self.belief_scope = model.scope(prefix + '/belief')
        self.offset_scope = model.scope(prefix + '/offset')

    def one_hot(self, cell):
        out = torch.zeros(self.grid.shape, dtype=self.model.dtype)
        out.view(-1)[int(cell)] = 1.0
        return out

    def zero_offsets(self):
        return torch.zeros(self.grid.shape + (2,), dtype=self.model.dtype)

    def belief_step(self, state, feedback):
        return coarse_step(state, feedback, self.s_bar, self.belief_scope,
                           self.model.config.use_gat,
                           self.model.config.gat_form)

    def offset_step(self, state, prev_offsets):
        return fine_step(state, prev_offsets, self.s_bar, self.offset_scope,
                         self.model.config.use_gat,
                         self.model.config.gat_form)

    def offsets(self, steps):
        """Offset rollout; the offset decoder never sees the belief."""
        if not self.model.config.use_fine_decoder:
            return [self.zero_offsets() for _ in range(steps)]
        state, prev, out = self.initial, self.zero_offsets(), []
        for _ in range(steps):
            state, prev = self.offset_step(state, prev)
            out.append(prev)
        return out

    def beliefs(self, steps):
        """Belief rollout feeding back the soft belief."""
        state, prev, out = self.initial, self.one_hot(self.last_cell), []
        for _ in range(steps):
            state, prev = self.belief_step(state, prev)
            out.append(prev)
        return out


def decoders(scenario, model, encoder_state):
    last = scenario.history[-1]
    return [ScaleDecoder(model, encoder_state, n, g, last)
            for n, g in enumerate(model.scale_grids(scenario.grid))]


def horizon(scenario, model):
    """Default number of decoded steps: the scenario's prediction length,
    capped by the model's."""
    return min(scenario.max_pred_len, model.config.max_pred_len)


def rollout(scenario, model, steps, encoder_state=None, strict=False):
    """Decodes ``steps`` future steps at every active scale.

    Returns:
      list of ScaleRollout(grid, beliefs, offsets), fine scale first.
    """
    if steps < 1:
        raise ArgumentError('rollout needs steps >= 1, got %r' % steps)
    if encoder_state is None:
        encoder_state = encode_history(scenario, model, strict=strict)
    out = []
    for dec in decoders(scenario, model, encoder_state):
        out.append(ScaleRollout(dec.grid, dec.beliefs(steps),
                                dec.offsets(steps)))
    return out

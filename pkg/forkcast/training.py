"""Losses, weight decay and the training loop.

The belief decoder is trained with cross-entropy against hard one-hot
targets and fed its own soft belief (no teacher forcing). The offset
decoder is trained with smooth-L1 at every cell.
"""
import csv
import logging
import math
from collections import namedtuple

import numpy as np
import torch
import torch.nn.functional as F

from forkcast import gridworld, log
from forkcast.config import ModelConfig, TrainConfig, torch_dtype
from forkcast.errors import ArgumentError, ShapeError, TrainingError
from forkcast.model import Model, encode_history, rollout

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12

LossBreakdown = namedtuple('LossBreakdown', 'l_cls l_reg l_wd total')
TrainResult = namedtuple('TrainResult', 'model history optimizer epochs_run')

OPTIMIZER_KEYS = {'adadelta': ('square_avg', 'acc_delta'),
                  'adam': ('exp_avg', 'exp_avg_sq'),
                  'sgd': ()}


def loss_cls(beliefs, gt_cells):
    """Mean over steps of ``-log C_t[true cell]``, probabilities clamped."""
    if len(beliefs) != len(gt_cells):
        raise ArgumentError('loss_cls got %d beliefs for %d targets' %
                            (len(beliefs), len(gt_cells)))
    if not beliefs:
        raise ArgumentError('loss_cls needs at least one step')
    terms = []
    for belief, cell in zip(beliefs, gt_cells):
        p = belief.reshape(-1)[int(cell)]
        terms.append(-torch.log(torch.clamp(p, min=PROB_CLAMP)))
    return torch.stack(terms).mean()


def loss_reg(offset_fields, gt_points, grid):
    """Smooth-L1 between offsets and ``L*_t - Q_i`` at every cell.

    Per cell the two coordinates are summed; the result is averaged over
    cells and steps.
    """
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if len(offset_fields) != len(gt_points):
        raise ArgumentError('loss_reg got %d offset fields for %d targets' %
                            (len(offset_fields), len(gt_points)))
    if not offset_fields:
        raise ArgumentError('loss_reg needs at least one step')
    terms = []
    for field, point in zip(offset_fields, gt_points):
        if tuple(field.shape) != grid.shape + (2,):
            raise ShapeError('offset field', grid.shape + (2,), field.shape)
        target = torch.as_tensor(gridworld.offset_targets(grid, point),
                                 dtype=field.dtype)
        per_cell = F.smooth_l1_loss(field, target, reduction='none',
                                    beta=1.0).sum(dim=-1)
        terms.append(per_cell.mean())
    return torch.stack(terms).mean()


def total_loss(terms, store, config):
    """Combines per-scale losses with weight decay.

    Args:
      terms: list of (l_cls, l_reg) pairs, one per scale; scales are summed
          with equal weight.
      store: ParameterStore whose trainable entries are decayed.
      config: TrainConfig supplying lambda1 and lambda2.
    Returns:
      (total tensor, LossBreakdown of floats).
    """
    zero = torch.zeros((), dtype=store.dtype)
    l_cls = sum((torch.as_tensor(c, dtype=store.dtype) for c, _ in terms),
                zero)
    l_reg = sum((torch.as_tensor(r, dtype=store.dtype) for _, r in terms),
                zero)
    l_wd = store.sum_of_squares()
    total = l_cls + config.lambda1 * l_reg + config.lambda2 * l_wd
    return total, breakdown(float(l_cls), float(l_reg), float(l_wd), config)


def breakdown(l_cls, l_reg, l_wd, config):
    return LossBreakdown(l_cls, l_reg, l_wd,
                         l_cls + config.lambda1 * l_reg +
                         config.lambda2 * l_wd)


def example_terms(model, scenario, j, strict=False):
    """Per-scale (l_cls, l_reg) of one (scenario, future) pair."""
    future = scenario.future_array(j)
    outputs = rollout(scenario, model, len(future),
                      encode_history(scenario, model, strict=strict))
    terms = []
    for out in outputs:
        cells = gridworld.quantize_points(out.grid, future)
        l_cls = loss_cls(out.beliefs, cells)
        if model.config.use_fine_decoder:
            l_reg = loss_reg(out.offsets, future, out.grid)
        else:
            l_reg = torch.zeros((), dtype=model.dtype)
        terms.append((l_cls, l_reg))
    return terms


def make_optimizer(params, config):
    if config.optimizer == 'adadelta':
        return torch.optim.Adadelta(params, lr=config.lr, rho=config.rho,
                                    eps=config.eps)
    if config.optimizer == 'adam':
        return torch.optim.Adam(params, lr=config.lr)
    return torch.optim.SGD(params, lr=config.lr)


def optimizer_arrays(optimizer, store, config):
    """Optimizer accumulators as ``optim/<param>/<key>`` arrays."""
    out, steps = {}, {}
    by_id = {id(p): name for name, p in store.trainable()}
    for group in optimizer.param_groups:
        for p in group['params']:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = by_id[id(p)]
            for key in OPTIMIZER_KEYS[config.optimizer]:
                out['optim/%s/%s' % (name, key)] = \
                    state[key].detach().cpu().numpy().copy()
            steps[name] = int(float(state.get('step', 0)))
    return out, steps


def restore_optimizer(optimizer, store, config, arrays, steps):
    keys = OPTIMIZER_KEYS[config.optimizer]
    if not keys:
        return
    state_dict = optimizer.state_dict()
    names = [name for name, _ in store.trainable()]
    state = {}
    for i, name in enumerate(names):
        if name not in steps:
            continue
        entry = {'step': torch.tensor(float(steps[name]))}
        for key in keys:
            entry[key] = torch.as_tensor(arrays['optim/%s/%s' % (name, key)],
                                         dtype=store.dtype)
        state[i] = entry
    state_dict['state'] = state
    optimizer.load_state_dict(state_dict)


def training_examples(scenario_set):
    return [(s, j) for s in scenario_set for j in range(s.j)]


def train(scenario_set, model_config=None, train_config=None, model=None,
          start_epoch=0, optimizer_state=None, on_epoch=None):
    """Trains a model on every (scenario, future) pair.

    Args:
      scenario_set: iterable of Scenario.
      model_config: ModelConfig (ignored when ``model`` is given).
      train_config: TrainConfig.
      model: optional Model to continue training.
      start_epoch: number of epochs already run (for resume).
      optimizer_state: (arrays, steps) as returned by optimizer_arrays.
      on_epoch: optional callback ``on_epoch(epoch, breakdown, model,
          optimizer)`` run after each epoch.
    Returns:
      TrainResult(model, history, optimizer, epochs_run).
    Raises:
      ArgumentError: empty training set.
      TrainingError: the loss became non-finite.
    """
    model_config = model_config or ModelConfig()
    config = train_config or TrainConfig()
    examples = training_examples(scenario_set)
    if not examples:
        raise ArgumentError('training needs at least one scenario')
    if model is None:
        model = Model(model_config, seed=config.seed,
                      dtype=torch_dtype(config.dtype))
    store = model.store
    optimizer = make_optimizer(store.parameters(), config)
    if optimizer_state is not None:
        restore_optimizer(optimizer, store, config, *optimizer_state)
    history = []
    last_finite = None
    best, stale = math.inf, 0
    epochs = range(start_epoch + 1, config.epochs + 1)
    if log.progress_enabled():
        from tqdm import tqdm
        epochs = tqdm(epochs, desc='train', unit='epoch')
    epoch = start_epoch
    for epoch in epochs:
        order = np.random.default_rng([config.seed, epoch]).permutation(
            len(examples))
        sums = np.zeros(3)
        batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [examples[k] for k in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            batch_terms = []
            for scenario, j in batch:
                terms = example_terms(model, scenario, j)
                batch_terms.append(terms)
            n = float(len(batch))
            per_scale = [(sum(t[s][0] for t in batch_terms) / n,
                          sum(t[s][1] for t in batch_terms) / n)
                         for s in range(len(batch_terms[0]))]
            total, parts = total_loss(per_scale, store, config)
            if not math.isfinite(parts.total):
                raise TrainingError(epoch, last_finite)
            total.backward()
            optimizer.step()
            sums += (parts.l_cls, parts.l_reg, parts.l_wd)
            batches += 1
        parts = breakdown(*[float(v) for v in sums / batches], config=config)
        if not (math.isfinite(parts.total) and store.all_finite()):
            raise TrainingError(epoch, last_finite)
        last_finite = parts.total
        history.append(parts)
        logger.info(log.kv(epoch=epoch, l_cls=parts.l_cls, l_reg=parts.l_reg,
                           l_wd=parts.l_wd, total=parts.total))
        if on_epoch is not None:
            on_epoch(epoch, parts, model, optimizer)
        if config.patience:
            if parts.total < best - config.min_delta:
                best, stale = parts.total, 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info(log.kv(early_stop=epoch, best=best))
                    break
    return TrainResult(model, history, optimizer, epoch)


LOG_FIELDS = ('epoch', 'l_cls', 'l_reg', 'l_wd', 'total')


def write_loss_log(history, path, start_epoch=0, append=False):
    """Writes ``epoch,l_cls,l_reg,l_wd,total`` rows."""
    with open(path, 'a' if append else 'w', newline='') as fd:
        writer = csv.writer(fd)
        if not append:
            writer.writerow(LOG_FIELDS)
        for k, parts in enumerate(history, start_epoch + 1):
            writer.writerow([k, repr(parts.l_cls), repr(parts.l_reg),
                             repr(parts.l_wd), repr(parts.total)])


def read_loss_log(path):
    with open(path, newline='') as fd:
        rows = list(csv.DictReader(fd))
    return [LossBreakdown(float(r['l_cls']), float(r['l_reg']),
                          float(r['l_wd']), float(r['total'])) for r in rows]

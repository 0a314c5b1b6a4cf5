"""Greedy decoding, diverse beam search and trajectory assembly.

Beam search talks to a *stepper* rather than to the model directly:

  state = stepper.start()
  probs, payload = stepper.probs(state)   # flat (H*W,) belief
  child = stepper.extend(payload, cell)   # feed back the chosen cell

``ModelStepper`` wraps a scale decoder and feeds back the hard one-hot of
each beam's chosen cell; the other steppers serve oracles and tests.
"""
import importlib
import inspect
import json
import logging
import math
import os
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import torch

from forkcast import gridworld
from forkcast.config import InferenceConfig
from forkcast.errors import ArgumentError, ConfigError, ScenarioParseError
from forkcast.model import decoders, encode_history, horizon

logger = logging.getLogger(__name__)


@dataclass
class Beam(object):
    cells: Tuple[int, ...] = ()
    log_prob: float = 0.0
    penalty: float = 0.0
    rank: int = 0

    @property
    def score(self):
        """Search score: model log-probability plus applied penalties."""
        return self.log_prob + self.penalty


@dataclass
class PredictionSet(object):
    scenario_id: str
    trajectories: List[np.ndarray]
    log_probs: List[float]
    beliefs: List[np.ndarray] = field(default_factory=list)
    scale: int = 0
    outside_cell: int = 0

    @property
    def k(self):
        return len(self.trajectories)

    def to_record(self):
        return {'scenario_id': self.scenario_id, 'K': self.k,
                'trajectories': [np.asarray(t).tolist()
                                 for t in self.trajectories],
                'log_probs': [float(p) for p in self.log_probs],
                'outside_cell': self.outside_cell}


# Steppers.

class FixedBeliefStepper(object):
    """Per-step beliefs that ignore the chosen cells."""

    def __init__(self, table):
        self.table = [np.asarray(p, dtype=np.float64).reshape(-1)
                      for p in table]

    def start(self):
        return 0

    def probs(self, state):
        return self.table[state], state

    def extend(self, payload, cell):  # pylint: disable=W0613
        return payload + 1


class PrefixStepper(object):
    """Beliefs computed from the full prefix of chosen cells."""

    def __init__(self, belief_fn):
        self.belief_fn = belief_fn

    def start(self):
        return ()

    def probs(self, state):
        return np.asarray(self.belief_fn(state), dtype=np.float64).reshape(-1), \
            state

    def extend(self, payload, cell):
        return payload + (int(cell),)


class ModelStepper(object):
    """Belief decoder of one scale with hard one-hot feedback."""

    def __init__(self, decoder):
        self.decoder = decoder

    def start(self):
        return (self.decoder.initial, self.decoder.last_cell)

    def probs(self, state):
        decoder_state, cell = state
        with torch.no_grad():
            new_state, belief = self.decoder.belief_step(
                decoder_state, self.decoder.one_hot(cell))
        return belief.double().numpy().reshape(-1), new_state

    def extend(self, payload, cell):
        return (payload, int(cell))


# Diversity penalties.

class DiversityPenalty(object):
    """Base class for beam selection rules."""
    name = None

    def select(self, scores, k, gamma0):
        """Picks up to ``k`` (parent, cell, penalty) triples.

        Args:
          scores: (n_beams, n_cells) array of accumulated search scores.
          k: beam width.
          gamma0: penalty strength.
        """
        raise NotImplementedError


class HammingDiversity(DiversityPenalty):
    """Rank-sequential penalty: a candidate loses ``gamma0`` for every
    higher-ranked new beam that already took its cell at this step."""
    name = 'hamming'

    def select(self, scores, k, gamma0):
        n_beams, n_cells = scores.shape
        taken = np.zeros(n_cells)
        used = np.zeros(scores.size, dtype=bool)
        out = []
        for _ in range(min(k, scores.size)):
            penalized = (scores - gamma0 * taken[None, :]).reshape(-1)
            free = np.flatnonzero(~used)
            best = free[int(np.argmax(penalized[free]))]
            parent, cell = divmod(int(best), n_cells)
            out.append((parent, cell, -gamma0 * taken[cell]))
            used[best] = True
            taken[cell] += 1
        return out


class SiblingDiversity(DiversityPenalty):
    """Intra-sibling ranking: the r-th best child of a beam loses
    ``gamma0 * r``."""
    name = 'sibling'

    def select(self, scores, k, gamma0):
        n_beams, n_cells = scores.shape
        order = np.argsort(-scores, axis=1, kind='stable')
        ranks = np.empty_like(order)
        rows = np.arange(n_beams)[:, None]
        ranks[rows, order] = np.arange(n_cells)[None, :]
        penalties = -gamma0 * ranks
        flat = (scores + penalties).reshape(-1)
        picks = np.argsort(-flat, kind='stable')[:k]
        return [(int(p) // n_cells, int(p) % n_cells,
                 float(penalties.reshape(-1)[p])) for p in picks]


def discover(modules=None, names=None):
    """Collects DiversityPenalty subclasses by name."""
    modules = modules or ['forkcast.inference']
    found = {}
    for module_name in modules:
        module = importlib.import_module(module_name)
        for member_name in dir(module):
            member = getattr(module, member_name)
            if (inspect.isclass(member) and
                    issubclass(member, DiversityPenalty) and
                    member is not DiversityPenalty and member.name):
                if names and member.name not in names:
                    continue
                found[member.name] = member
    return found


def penalty_for(name):
    penalties = discover()
    if name not in penalties:
        raise ConfigError('unknown diversity penalty %r (known: %s)' %
                          (name, ', '.join(sorted(penalties))))
    return penalties[name]()


def check_beam_width(k, n_cells, steps):
    if k < 1:
        raise ArgumentError('beam width must be >= 1, got %r' % k)
    if steps < 1:
        raise ArgumentError('steps must be >= 1, got %r' % steps)
    if math.log(k) > steps * math.log(n_cells) + 1e-12:
        raise ArgumentError('K=%d exceeds the %d^%d possible sequences' %
                            (k, n_cells, steps))


def _log(probs):
    with np.errstate(divide='ignore'):
        return np.log(probs)


def diverse_beam_search(stepper, k, gamma0, steps, diversity='hamming'):
    """Beam search over grid cells with a diversity penalty.

    Returns:
      list of K Beams sorted by unpenalized log-probability (ties keep
      search order), ranks set accordingly.
    """
    if gamma0 < 0:
        raise ArgumentError('gamma0 must be >= 0, got %r' % gamma0)
    penalty = penalty_for(diversity) if isinstance(diversity, str) \
        else diversity
    expansions = [stepper.probs(stepper.start())]
    check_beam_width(k, expansions[0][0].size, steps)
    beams, states = [Beam()], []
    for t in range(steps):
        if t:
            expansions = [stepper.probs(s) for s in states]
        logp = np.stack([_log(p) for p, _ in expansions])
        scores = np.array([b.score for b in beams])[:, None] + logp
        picks = penalty.select(scores, k, gamma0)
        new_beams, states = [], []
        for rank, (parent, cell, pen) in enumerate(picks):
            base = beams[parent]
            new_beams.append(Beam(base.cells + (cell,),
                                  base.log_prob + float(logp[parent, cell]),
                                  base.penalty + float(pen), rank))
            states.append(stepper.extend(expansions[parent][1], cell))
        beams = new_beams
    order = sorted(range(len(beams)), key=lambda i: -beams[i].log_prob)
    out = []
    for rank, i in enumerate(order):
        beam = beams[i]
        beam.rank = rank
        out.append(beam)
    return out


def greedy_search(stepper, steps):
    """Argmax decoding with hard feedback; ties go to the lowest cell."""
    state, cells, log_prob = stepper.start(), [], 0.0
    for _ in range(steps):
        probs, payload = stepper.probs(state)
        cell = int(np.argmax(probs))
        log_prob += float(_log(probs[cell]))
        cells.append(cell)
        state = stepper.extend(payload, cell)
    return Beam(tuple(cells), log_prob, 0.0, 0)


def _as_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().double().numpy()
    return np.asarray(x, dtype=np.float64)


def greedy_decode(beliefs, offsets, grid):
    """Single trajectory from precomputed beliefs and offsets.

    Each step takes the argmax cell (lowest index on ties) and emits its
    center plus that cell's offset.
    """
    if len(beliefs) != len(offsets):
        raise ArgumentError('greedy_decode got %d beliefs and %d offsets' %
                            (len(beliefs), len(offsets)))
    cells = [int(np.argmax(_as_numpy(b).reshape(-1))) for b in beliefs]
    beam = Beam(tuple(cells))
    return assemble_trajectories([beam], offsets, grid).trajectories[0]


def assemble_trajectories(beams, offset_fields, grid, scenario_id=''):
    """``L_t = cell_center(cell) + offset[cell]`` for every beam.

    Args:
      beams: list of Beam.
      offset_fields: one list of (H, W, 2) fields shared by every beam, or
          one such list per beam.
      grid: GridSpec the cells index into.
    """
    shared = not offset_fields or \
        not isinstance(offset_fields[0], (list, tuple))
    trajectories, outside = [], 0
    centers = gridworld.cell_centers(grid).reshape(-1, 2)
    half = np.array([grid.cell_w / 2.0, grid.cell_h / 2.0])
    for n, beam in enumerate(beams):
        fields = offset_fields if shared else offset_fields[n]
        if len(fields) != len(beam.cells):
            raise ArgumentError('beam has %d steps but %d offset fields' %
                                (len(beam.cells), len(fields)))
        points = []
        for cell, f in zip(beam.cells, fields):
            off = _as_numpy(f).reshape(-1, 2)[cell]
            if np.any(np.abs(off) > half):
                outside += 1
            points.append(centers[cell] + off)
        trajectories.append(np.asarray(points).reshape(-1, 2))
    if outside:
        logger.debug('scenario=%s outside_cell=%d', scenario_id, outside)
    return PredictionSet(scenario_id, trajectories,
                         [b.log_prob for b in beams], outside_cell=outside)


def predict_scenario(model, scenario, config=None, steps=None):
    """K trajectories for one scenario from the fine-scale decoders.

    The offset decoder does not read the belief, so its rollout is the same
    for every beam and is computed once.
    """
    config = config or InferenceConfig()
    steps = steps or horizon(scenario, model)
    with torch.no_grad():
        enc = encode_history(scenario, model, strict=config.strict_bounds)
        fine = decoders(scenario, model, enc)[0]
        offsets = fine.offsets(steps)
        soft = fine.beliefs(steps)
    stepper = ModelStepper(fine)
    beams = diverse_beam_search(stepper, config.k, config.gamma, steps,
                                config.diversity)
    out = assemble_trajectories(beams, offsets, fine.grid,
                                scenario.scenario_id)
    out.beliefs = [b.double().numpy() for b in soft]
    return out


def greedy_predict(model, scenario, steps=None, strict=False):
    """Single-future prediction by greedy search with hard feedback."""
    steps = steps or horizon(scenario, model)
    with torch.no_grad():
        enc = encode_history(scenario, model, strict=strict)
        fine = decoders(scenario, model, enc)[0]
        offsets = fine.offsets(steps)
    beam = greedy_search(ModelStepper(fine), steps)
    return assemble_trajectories([beam], offsets, fine.grid,
                                 scenario.scenario_id)


def predict_all(model, scenarios, config=None, jobs=1):
    """Predictions in scenario order, optionally fanned out over threads."""
    config = config or InferenceConfig()
    scenarios = list(scenarios)
    if jobs <= 1:
        return [predict_scenario(model, s, config) for s in scenarios]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda s: predict_scenario(model, s, config),
                             scenarios))


def write_predictions(predictions, path):
    with open(path, 'w', encoding='utf-8') as fd:
        for p in predictions:
            fd.write(json.dumps(p.to_record(), sort_keys=True) + '\n')


PredictionRecord = namedtuple('PredictionRecord',
                              'scenario_id trajectories log_probs')


def read_predictions(path):
    """Reads a prediction file into ``{scenario_id: PredictionRecord}``."""
    out = {}
    with open(path, encoding='utf-8') as fd:
        for line_no, line in enumerate(fd, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                record = PredictionRecord(
                    data['scenario_id'],
                    [np.asarray(t, dtype=np.float64).reshape(-1, 2)
                     for t in data['trajectories']],
                    list(data.get('log_probs', [])))
            except (ValueError, KeyError, TypeError) as exc:
                raise ScenarioParseError('bad prediction record: %s' % exc,
                                         line_no)
            out[record.scenario_id] = record
    return out


def export_heatmaps(prediction, grid, out_dir):
    """Writes per-step beliefs as CSV and max-normalized 8-bit PGM."""
    if not os.path.isdir(out_dir):
        os.makedirs(out_dir)
    written = []
    for t, belief in enumerate(prediction.beliefs, 1):
        belief = np.asarray(belief, dtype=np.float64).reshape(grid.shape)
        stem = os.path.join(out_dir, '%s_t%02d' % (prediction.scenario_id, t))
        np.savetxt(stem + '.csv', belief, delimiter=',', fmt='%.9g')
        peak = belief.max()
        scaled = belief / peak if peak > 0 else belief
        pixels = np.round(scaled * 255.0).astype(np.uint8)
        with open(stem + '.pgm', 'wb') as fd:
            fd.write(b'P5\n%d %d\n255\n' % (grid.cols, grid.rows))
            fd.write(pixels.tobytes())
        written.append(stem)
    return written

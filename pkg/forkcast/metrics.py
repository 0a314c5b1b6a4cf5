"""Displacement and likelihood metrics for single- and multi-future
prediction.

Predictions are always at least as long as a ground-truth future and are
truncated to that future's length before comparison.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from forkcast import gridworld
from forkcast.errors import ArgumentError, ConfigError

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
UNITS = 'scene units'


def _traj(x, what):
    arr = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    if not len(arr):
        raise ArgumentError('%s trajectory is empty' % what)
    return arr


def displacement(pred, gt):
    """Per-step Euclidean errors of ``pred`` truncated to ``len(gt)``."""
    gt = _traj(gt, 'ground-truth')
    pred = _traj(pred, 'predicted')
    if len(pred) < len(gt):
        raise ArgumentError('prediction has %d steps, ground truth %d' %
                            (len(pred), len(gt)))
    diff = pred[:len(gt)] - gt
    return np.sqrt(np.sum(diff ** 2, axis=1))


def ade_fde(pred, gt):
    errors = displacement(pred, gt)
    return float(np.mean(errors)), float(errors[-1])


def duplicate_to_k(preds, k):
    """Repeats a short prediction list cyclically up to ``k`` entries."""
    preds = list(preds)
    if not preds:
        raise ArgumentError('no predictions to duplicate')
    return [preds[n % len(preds)] for n in range(k)]


def min_errors(preds, gts):
    """Per-future (minADE, minFDE, ADE-minimizing step errors).

    minFDE is minimized independently of minADE.
    """
    if not len(preds) or not len(gts):
        raise ArgumentError('min_ade_fde_k needs K >= 1 and J >= 1')
    out = []
    for gt in gts:
        errors = [displacement(p, gt) for p in preds]
        ades = [float(np.mean(e)) for e in errors]
        fdes = [float(e[-1]) for e in errors]
        best = int(np.argmin(ades))
        out.append((ades[best], min(fdes), errors[best]))
    return out


def min_ade_fde_k(preds, gts):
    per_future = min_errors(preds, gts)
    return (float(np.mean([a for a, _, _ in per_future])),
            float(np.mean([f for _, f, _ in per_future])))


def horizon_frames(horizons, unit='seconds', fps=2.5):
    """Horizons as frame offsets; seconds round half up (1s -> 3 at 2.5fps)."""
    if unit == 'frames':
        frames = [int(h) for h in horizons]
    else:
        frames = [int(math.floor(fps * h + 0.5)) for h in horizons]
    if len(set(frames)) != len(frames):
        raise ConfigError('eval.horizons %s fall on repeated frames %s' %
                          (list(horizons), frames))
    return frames


def nll_terms(belief_sequence, gts, grid, horizons):
    """Per-horizon lists of ``-log C[cell]`` and the count of skipped futures.

    ``horizons`` are frame offsets after the last observation (1 is the
    first predicted frame).
    """
    terms = {h: [] for h in horizons}
    skipped = {h: 0 for h in horizons}
    for gt in gts:
        gt = _traj(gt, 'ground-truth')
        for h in horizons:
            if h < 1 or h > len(gt) or h > len(belief_sequence):
                skipped[h] += 1
                continue
            cell = gridworld.quantize_point(grid, gt[h - 1])
            p = float(np.asarray(belief_sequence[h - 1]).reshape(-1)[cell])
            terms[h].append(-math.log(max(p, PROB_CLAMP)))
    return terms, skipped


def nll(belief_sequence, gts, grid, horizons):
    """Mean NLL per horizon; a horizon no future reaches maps to None."""
    terms, _ = nll_terms(belief_sequence, gts, grid, horizons)
    return {h: (float(np.mean(v)) if v else None) for h, v in terms.items()}


@dataclass
class EvalReport(object):
    group: str = 'all'
    ade: Optional[float] = None
    fde: Optional[float] = None
    min_ade_k: Optional[float] = None
    min_fde_k: Optional[float] = None
    nll_at: Dict[float, Optional[float]] = field(default_factory=dict)
    nll_skipped: Dict[float, int] = field(default_factory=dict)
    n_scenarios: int = 0
    n_futures: int = 0
    k: int = 0
    units: str = UNITS

    def to_dict(self):
        out = dict(self.__dict__)
        out['nll_at'] = {str(h): v for h, v in self.nll_at.items()}
        out['nll_skipped'] = {str(h): v for h, v in self.nll_skipped.items()}
        return out


class _Accumulator(object):

    def __init__(self, horizons, aggregate):
        self.aggregate = aggregate
        self.ade, self.fde, self.min_ade, self.min_fde = [], [], [], []
        self.nll = {h: [] for h in horizons}
        self.skipped = {h: 0 for h in horizons}
        self.scenarios = 0

    def add(self, preds, gts, beliefs, grid, horizons):
        self.scenarios += 1
        for gt in gts:
            errors = displacement(preds[0], gt)
            if self.aggregate == 'timestep':
                self.ade.extend(errors.tolist())
            else:
                self.ade.append(float(np.mean(errors)))
            self.fde.append(float(errors[-1]))
        for min_ade, min_fde, errors in min_errors(preds, gts):
            if self.aggregate == 'timestep':
                self.min_ade.extend(errors.tolist())
            else:
                self.min_ade.append(min_ade)
            self.min_fde.append(min_fde)
        if beliefs:
            terms, skipped = nll_terms(beliefs, gts, grid, horizons)
            for h in horizons:
                self.nll[h].extend(terms[h])
                self.skipped[h] += skipped[h]

    def report(self, group, k, n_futures, labels):
        mean = lambda v: float(np.mean(v)) if v else None
        return EvalReport(
            group=group, ade=mean(self.ade), fde=mean(self.fde),
            min_ade_k=mean(self.min_ade), min_fde_k=mean(self.min_fde),
            nll_at={labels[h]: mean(v) for h, v in self.nll.items()},
            nll_skipped={labels[h]: v for h, v in self.skipped.items()},
            n_scenarios=self.scenarios, n_futures=n_futures, k=k)


def view_groups(view_tag):
    family = '45-degree' if view_tag.startswith('deg45') else 'top-down'
    return [view_tag, family, 'all']


def evaluate(scenarios, predictions, beliefs=None, config=None):
    """Grouped EvalReports.

    Args:
      scenarios: iterable of Scenario with ground-truth futures.
      predictions: ``{scenario_id: [trajectory, ...]}`` ranked best first;
          fewer than ``config.k`` trajectories are duplicated up to K.
      beliefs: optional ``{scenario_id: [belief per step]}`` at the
          scenario's fine grid, for NLL.
      config: EvalConfig.
    Returns:
      ``{group: EvalReport}`` for every view tag, the 45-degree/top-down
      families and 'all'.
    """
    from forkcast.config import EvalConfig
    config = config or EvalConfig()
    frames = horizon_frames(config.horizons, config.horizon_unit, config.fps)
    labels = dict(zip(frames, config.horizons))
    beliefs = beliefs or {}
    missing = [s.scenario_id for s in scenarios
               if s.scenario_id not in predictions]
    if missing:
        raise ArgumentError('no predictions for scenarios: %s' %
                            ', '.join(missing))
    accumulators, futures = {}, {}
    for s in scenarios:
        preds = duplicate_to_k(predictions[s.scenario_id], config.k)[:config.k]
        for group in view_groups(s.view_tag):
            acc = accumulators.setdefault(
                group, _Accumulator(frames, config.aggregate))
            acc.add(preds, s.future_arrays(), beliefs.get(s.scenario_id),
                    s.grid, frames)
            futures[group] = futures.get(group, 0) + s.j
    return {g: acc.report(g, config.k, futures[g], labels)
            for g, acc in accumulators.items()}


def per_scenario_rows(scenarios, predictions, k):
    rows = []
    for s in scenarios:
        preds = duplicate_to_k(predictions[s.scenario_id], k)[:k]
        gts = s.future_arrays()
        ade = np.mean([ade_fde(preds[0], gt)[0] for gt in gts])
        fde = np.mean([ade_fde(preds[0], gt)[1] for gt in gts])
        min_ade, min_fde = min_ade_fde_k(preds, gts)
        rows.append({'scenario_id': s.scenario_id, 'view_tag': s.view_tag,
                     'j': s.j, 'ade': float(ade), 'fde': float(fde),
                     'min_ade_k': min_ade, 'min_fde_k': min_fde})
    return rows


def write_reports(reports, path):
    with open(path, 'w') as fd:
        json.dump({g: r.to_dict() for g, r in sorted(reports.items())}, fd,
                  indent=2, sort_keys=True)


def write_rows(rows, path):
    fields = ('scenario_id', 'view_tag', 'j', 'ade', 'fde', 'min_ade_k',
              'min_fde_k')
    with open(path, 'w', newline='') as fd:
        writer = csv.DictWriter(fd, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def _fmt(value):
    return '-' if value is None else '%.3f' % value


def format_table(reports):
    """Human-readable table, one row per group."""
    groups = sorted(reports, key=lambda g: (g == 'all', g))
    if not groups:
        return ''
    horizons = list(reports[groups[0]].nll_at)
    header = ['group', 'N', 'J', 'K', 'ADE', 'FDE', 'minADE_K', 'minFDE_K']
    header += ['NLL@%s' % h for h in horizons]
    lines = [header]
    for g in groups:
        r = reports[g]
        lines.append([g, str(r.n_scenarios), str(r.n_futures), str(r.k),
                      _fmt(r.ade), _fmt(r.fde), _fmt(r.min_ade_k),
                      _fmt(r.min_fde_k)] +
                     [_fmt(r.nll_at.get(h)) for h in horizons])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return '\n'.join('  '.join(cell.ljust(w) for cell, w in zip(row, widths))
                     for row in lines)

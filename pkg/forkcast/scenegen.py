"""Semantic scene maps, the scenario data model and a procedural generator
of multi-future "forking" scenarios.

A forking scenario is one observed history that ends at a fork point,
followed by J futures that each walk to a different destination. The scene
is static; one semantic map is reused for every history frame.
"""
import dataclasses
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from forkcast import gridworld
from forkcast.config import GeneratorConfig
from forkcast.errors import (ArgumentError, ConfigError, GenerationError,
                             ScenarioParseError, ScenarioVersionError,
                             ShapeError)
from forkcast.gridworld import GridSpec, Point2

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

CLASS_NAMES = ('sidewalk', 'road', 'vehicle', 'pedestrian', 'building',
               'grass', 'tree', 'pole', 'fence', 'sky', 'water', 'stairs',
               'other')
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
WALKABLE = frozenset(CLASS_IDS[n] for n in ('sidewalk', 'road', 'grass',
                                            'stairs'))
SIDEWALK = CLASS_IDS['sidewalk']
ROAD = CLASS_IDS['road']
BUILDING = CLASS_IDS['building']
GRASS = CLASS_IDS['grass']

# Fractions of the scene box where the fork and the destinations sit.
FORK_X = 0.4
STEM_X = 0.6
DEST_X = 0.85
DEST_Y_SPAN = (0.15, 0.85)
MARGIN = 0.5


class SemanticMap(object):
    """Per-cell class ids at grid resolution."""

    def __init__(self, grid, labels, k_classes=len(CLASS_NAMES)):
        labels = np.asarray(labels)
        if labels.shape != grid.shape:
            raise ShapeError('semantic labels', grid.shape, labels.shape)
        if k_classes <= 0:
            raise ConfigError('k_classes must be positive')
        if labels.size and (labels.min() < 0 or labels.max() >= k_classes):
            raise ArgumentError('semantic labels must lie in [0, %d)' %
                                k_classes)
        self.grid = grid
        self.labels = labels.astype(np.int64)
        self.labels.setflags(write=False)
        self.k_classes = int(k_classes)

    def __eq__(self, other):
        return (isinstance(other, SemanticMap) and
                self.grid == other.grid and
                self.k_classes == other.k_classes and
                np.array_equal(self.labels, other.labels))

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return 'SemanticMap(%dx%d, k=%d)' % (self.grid.rows, self.grid.cols,
                                            self.k_classes)

    def walkable_mask(self):
        return np.isin(self.labels, sorted(WALKABLE))

    def classes_present(self):
        return sorted(set(int(v) for v in np.unique(self.labels)))


@dataclass(frozen=True)
class Scenario(object):
    scenario_id: str
    grid: GridSpec
    coarse_grid: GridSpec
    semantic_maps: Tuple[SemanticMap, ...]
    history: Tuple[Point2, ...]
    futures: Tuple[Tuple[Point2, ...], ...]
    destinations: Tuple[Point2, ...]
    view_tag: str = 'topdown'
    fps: float = 2.5
    max_pred_len: int = 26

    def __post_init__(self):
        validate_scenario(self)

    @property
    def h(self):
        return len(self.history)

    @property
    def j(self):
        return len(self.futures)

    def history_array(self):
        return np.asarray(self.history, dtype=np.float64).reshape(-1, 2)

    def future_array(self, j):
        return np.asarray(self.futures[j], dtype=np.float64).reshape(-1, 2)

    def future_arrays(self):
        return [self.future_array(j) for j in range(self.j)]

    def frame_maps(self):
        """One semantic map per history frame, reusing a static map."""
        if len(self.semantic_maps) == 1:
            return list(self.semantic_maps) * self.h
        return list(self.semantic_maps)

    def with_futures(self, futures):
        return dataclasses.replace(self, futures=tuple(
            tuple(Point2(*p) for p in f) for f in futures))


def validate_scenario(s):
    if s.h < 1:
        raise ArgumentError('scenario %s has an empty history' % s.scenario_id)
    if s.j < 1:
        raise ArgumentError('scenario %s has no futures' % s.scenario_id)
    for j, future in enumerate(s.futures):
        if not future:
            raise ArgumentError('scenario %s future %d is empty' %
                                (s.scenario_id, j))
        if len(future) > s.max_pred_len:
            raise ArgumentError('scenario %s future %d has %d steps, more '
                                'than max_pred_len=%d' %
                                (s.scenario_id, j, len(future),
                                 s.max_pred_len))
    if len(s.semantic_maps) not in (1, s.h):
        raise ArgumentError('scenario %s needs 1 or %d semantic maps, got %d' %
                            (s.scenario_id, s.h, len(s.semantic_maps)))
    for m in s.semantic_maps:
        if m.grid != s.grid:
            raise ShapeError('semantic map grid', s.grid.shape, m.grid.shape)
    if not gridworld.same_bbox(s.grid, s.coarse_grid):
        raise ConfigError('scenario %s coarse grid covers a different area' %
                          s.scenario_id)


@dataclass(frozen=True)
class ScenarioSet(object):
    scenarios: Tuple[Scenario, ...]
    seed: Optional[int] = None
    generator_config: Optional[dict] = None

    def __post_init__(self):
        ids = [s.scenario_id for s in self.scenarios]
        dupes = sorted(set(i for i in ids if ids.count(i) > 1))
        if dupes:
            raise ArgumentError('duplicate scenario ids: %s' % ', '.join(dupes))

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def by_id(self):
        return {s.scenario_id: s for s in self.scenarios}


def one_hot_semantic(m):
    """(rows, cols, K) one-hot encoding of a semantic map."""
    return np.eye(m.k_classes, dtype=np.float64)[m.labels]


def temporal_average(maps):
    """Mean over the frame axis of a list of (rows, cols, K) maps."""
    if maps is None or len(maps) == 0:
        raise ArgumentError('temporal_average needs at least one map')
    shape = np.shape(maps[0])
    for m in maps[1:]:
        if np.shape(m) != shape:
            raise ShapeError('semantic frame', shape, np.shape(m))
    return np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in maps]),
                   axis=0)


# Generation.

def _polyline_points(waypoints, n):
    """``n`` points at equal arc-length spacing along a polyline, ending on
    its last waypoint (the first waypoint itself is excluded)."""
    waypoints = np.asarray(waypoints, dtype=np.float64)
    seg = np.diff(waypoints, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    out = []
    for k in range(1, n + 1):
        d = total * k / n
        s = min(int(np.searchsorted(cum, d, side='right')) - 1, len(seg) - 1)
        t = 0.0 if seg_len[s] == 0 else (d - cum[s]) / seg_len[s]
        out.append(waypoints[s] + t * seg[s])
    out[-1] = waypoints[-1]
    return np.asarray(out)


def _dense_path(waypoints, step):
    waypoints = np.asarray(waypoints, dtype=np.float64)
    length = np.sum(np.hypot(*np.diff(waypoints, axis=0).T))
    n = max(2, int(math.ceil(length / step)) * 2)
    return np.vstack([waypoints[:1], _polyline_points(waypoints, n)])


def _layout(config, rng):
    """Samples start, fork, stem and destination points in world units."""
    w, h = config.width, config.height
    jx = lambda: rng.uniform(-config.jitter, config.jitter)
    mid_y = h / 2.0 + jx() * 0.5
    fork = np.array([FORK_X * w + jx() * 0.5, mid_y])
    ys = np.linspace(DEST_Y_SPAN[0] * h, DEST_Y_SPAN[1] * h,
                     config.destinations)
    dests = np.stack([np.full(config.destinations, DEST_X * w), ys], axis=1)
    dests += rng.uniform(-config.jitter, config.jitter, dests.shape) * 0.5
    dests[:, 0] = np.clip(dests[:, 0], MARGIN, w - MARGIN)
    dests[:, 1] = np.clip(dests[:, 1], MARGIN, h - MARGIN)
    # Each branch bends half way towards its destination row, so futures
    # split right after the fork.
    bends = np.stack([np.full(config.destinations, STEM_X * w),
                      fork[1] + 0.5 * (dests[:, 1] - fork[1])], axis=1)
    speed = min(config.speed, (fork[0] - MARGIN) / max(config.h - 1, 1))
    if speed <= 0:
        raise ValueError('history does not fit left of the fork')
    return fork, bends, dests, speed


def _paint_map(config, grid, paths, rng):
    labels = np.full(grid.shape, SIDEWALK, dtype=np.int64)
    centers = gridworld.cell_centers(grid)
    # Road band along the history row, grass on the far left edge.
    road_row = gridworld.index_to_rc(grid, gridworld.quantize_point(
        grid, paths[0][0]))[0]
    labels[road_row, :] = ROAD
    labels[:, 0] = GRASS
    reserved = np.zeros(grid.shape, dtype=bool)
    for path in paths:
        for idx in gridworld.quantize_points(grid, path):
            r, c = divmod(int(idx), grid.cols)
            reserved[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = True
    placed = 0
    for _ in range(config.obstacles * 20):
        if placed >= config.obstacles:
            break
        bh = int(rng.integers(1, 4))
        bw = int(rng.integers(1, 4))
        r0 = int(rng.integers(0, max(grid.rows - bh, 0) + 1))
        c0 = int(rng.integers(0, max(grid.cols - bw, 0) + 1))
        if reserved[r0:r0 + bh, c0:c0 + bw].any():
            continue
        labels[r0:r0 + bh, c0:c0 + bw] = BUILDING
        reserved[r0:r0 + bh, c0:c0 + bw] = True
        placed += 1
    if not (labels == BUILDING).any():
        free = np.argwhere(~reserved)
        if len(free) == 0:
            return None
        # Farthest free cell from the fork.
        fork = paths[0][-1]
        d = np.hypot(centers[free[:, 0], free[:, 1], 0] - fork[0],
                     centers[free[:, 0], free[:, 1], 1] - fork[1])
        r, c = free[int(np.argmax(d))]
        labels[r, c] = BUILDING
    return labels


def _attempt(config, grid, coarse, rng, scenario_id, view_tag):
    fork, bends, dests, speed = _layout(config, rng)
    history = np.array([fork - (config.h - 1 - t) * speed * np.array([1.0, 0])
                        for t in range(config.h)])
    chosen = np.sort(rng.choice(config.destinations, config.j, replace=False))
    routes = [np.array([fork, bends[k], dests[k]]) for k in chosen]
    futures = []
    for route in routes:
        length = np.sum(np.hypot(*np.diff(route, axis=0).T))
        n = min(config.max_pred_len, max(1, int(math.ceil(length / speed))))
        futures.append(_polyline_points(route, n))
    if config.sigma > 0:
        history = history + rng.normal(0.0, config.sigma, history.shape)
        history[-1] = fork
        futures = [f + rng.normal(0.0, config.sigma, f.shape) for f in futures]
    dense = [_dense_path(np.vstack([history, fork]), grid.cell_w / 2.0)]
    dense += [_dense_path(r, min(grid.cell_w, grid.cell_h) / 2.0)
              for r in routes]
    labels = _paint_map(config, grid, dense, rng)
    if labels is None:
        return None, 'no room for an impassable cell'
    smap = SemanticMap(grid, labels, config.k_classes)
    walkable = smap.walkable_mask()
    x0, y0, x1, y1 = grid.bbox
    end_cells = set()
    for pts in [history] + futures:
        inside = ((pts[:, 0] >= x0) & (pts[:, 0] < x1) &
                  (pts[:, 1] >= y0) & (pts[:, 1] < y1))
        if not inside.all():
            return None, 'trajectory leaves the scene'
        cells = gridworld.quantize_points(grid, pts, strict=True)
        if not walkable.reshape(-1)[cells].all():
            return None, 'trajectory crosses an impassable cell'
    for f in futures:
        end_cells.add(int(gridworld.quantize_point(grid, f[-1])))
    if len(end_cells) < config.j:
        return None, 'destinations are not distinct cells'
    return Scenario(
        scenario_id=scenario_id, grid=grid, coarse_grid=coarse,
        semantic_maps=(smap,),
        history=tuple(Point2(float(x), float(y)) for x, y in history),
        futures=tuple(tuple(Point2(float(x), float(y)) for x, y in f)
                      for f in futures),
        destinations=tuple(Point2(float(x), float(y)) for x, y in dests),
        view_tag=view_tag, fps=float(config.fps),
        max_pred_len=int(config.max_pred_len)), None


def scenario_grids(config):
    grid = GridSpec.covering(config.rows, config.cols, config.width,
                             config.height, scale_id=0)
    coarse = grid.rescaled(config.rows // config.coarse_factor,
                           config.cols // config.coarse_factor, scale_id=1)
    return grid, coarse


def generate_forking_scenario(config, rng_seed, scenario_id=None):
    """Builds one forking scenario; deterministic in (config, rng_seed).

    Raises:
      GenerationError: no valid scenario after ``config.max_retries``
          attempts.
    """
    config = config or GeneratorConfig()
    config.validate()
    grid, coarse = scenario_grids(config)
    scenario_id = scenario_id or 'fork-%d' % rng_seed
    view_tag = config.view_tags[rng_seed % len(config.view_tags)]
    reason = None
    for attempt in range(config.max_retries):
        rng = np.random.default_rng([rng_seed, attempt])
        try:
            scenario, reason = _attempt(config, grid, coarse, rng,
                                        scenario_id, view_tag)
        except ValueError as exc:
            scenario, reason = None, str(exc)
        if scenario is not None:
            if attempt:
                logger.debug('seed=%s attempts=%d', rng_seed, attempt + 1)
            return scenario
    raise GenerationError('no valid scenario after %d attempts: %s' %
                          (config.max_retries, reason), rng_seed)


def derive_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_scenario_set(config, seed, n):
    config = config or GeneratorConfig()
    scenarios = tuple(
        generate_forking_scenario(config, derive_seed(seed, i),
                                  scenario_id='s%d-%04d' % (seed, i))
        for i in range(n))
    return ScenarioSet(scenarios, seed=seed,
                       generator_config=config.to_dict())


def summarize(scenario_set):
    n = len(scenario_set)
    if not n:
        return {'scenarios': 0, 'mean_j': 0.0, 'mean_future_len': 0.0}
    lengths = [len(f) for s in scenario_set for f in s.futures]
    return {'scenarios': n,
            'mean_j': sum(s.j for s in scenario_set) / float(n),
            'mean_future_len': sum(lengths) / float(len(lengths))}


# Persistence: JSON Lines plus a ``<name>.meta.json`` sidecar.

def meta_path(path):
    root, _ = os.path.splitext(path)
    return root + '.meta.json'


def _points(pts):
    return [[p[0], p[1]] for p in pts]


def scenario_to_dict(s):
    return {'v': FORMAT_VERSION,
            'scenario_id': s.scenario_id,
            'grid': s.grid.to_dict(),
            'coarse_grid': s.coarse_grid.to_dict(),
            'semantic_maps': [{'k_classes': m.k_classes,
                               'labels': m.labels.reshape(-1).tolist()}
                              for m in s.semantic_maps],
            'history': _points(s.history),
            'futures': [_points(f) for f in s.futures],
            'destinations': _points(s.destinations),
            'view_tag': s.view_tag,
            'fps': s.fps,
            'max_pred_len': s.max_pred_len}


REQUIRED = ('scenario_id', 'grid', 'coarse_grid', 'semantic_maps', 'history',
            'futures', 'destinations', 'view_tag', 'fps', 'max_pred_len')


def _read_points(value, field, line):
    try:
        return tuple(Point2(float(x), float(y)) for x, y in value)
    except (TypeError, ValueError):
        raise ScenarioParseError('expected a list of [x, y] pairs', line,
                                 field)


def _read_field(data, field, convert, line):
    try:
        return convert(data[field])
    except (KeyError, TypeError, ValueError, OverflowError) as exc:
        raise ScenarioParseError('bad value: %s' % exc, line, field)


def _read_maps(value, grid, line):
    if not isinstance(value, list):
        raise ScenarioParseError('expected a list of maps', line,
                                 'semantic_maps')
    maps = []
    for m in value:
        try:
            labels = np.asarray(m['labels'], dtype=np.int64).reshape(
                grid.shape)
            maps.append(SemanticMap(grid, labels, int(m['k_classes'])))
        except (KeyError, TypeError, ValueError, ArgumentError, ConfigError,
                ShapeError) as exc:
            raise ScenarioParseError('bad semantic map: %s' % exc, line,
                                     'semantic_maps')
    return tuple(maps)


def _read_futures(value, line):
    if not isinstance(value, list):
        raise ScenarioParseError('expected a list of trajectories', line,
                                 'futures')
    return tuple(_read_points(f, 'futures', line) for f in value)


def scenario_from_dict(data, line=None):
    if not isinstance(data, dict):
        raise ScenarioParseError('expected a JSON object', line)
    if data.get('v') != FORMAT_VERSION:
        raise ScenarioVersionError('unsupported version %r (expected %d)' %
                                   (data.get('v'), FORMAT_VERSION), line, 'v')
    for name in REQUIRED:
        if name not in data:
            raise ScenarioParseError('missing field', line, name)
    try:
        grid = GridSpec.from_dict(data['grid'])
        coarse = GridSpec.from_dict(data['coarse_grid'])
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise ScenarioParseError('bad grid: %s' % exc, line, 'grid')
    maps = _read_maps(data['semantic_maps'], grid, line)
    futures = _read_futures(data['futures'], line)
    history = _read_points(data['history'], 'history', line)
    destinations = _read_points(data['destinations'], 'destinations', line)
    fps = _read_field(data, 'fps', float, line)
    max_pred_len = _read_field(data, 'max_pred_len', int, line)
    try:
        return Scenario(
            scenario_id=str(data['scenario_id']), grid=grid,
            coarse_grid=coarse, semantic_maps=maps, history=history,
            futures=futures, destinations=destinations,
            view_tag=str(data['view_tag']), fps=fps,
            max_pred_len=max_pred_len)
    except (ArgumentError, ShapeError, ConfigError) as exc:
        raise ScenarioParseError(str(exc), line)


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as out:
            out.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_scenarios(scenario_set, path):
    lines = [json.dumps(scenario_to_dict(s), sort_keys=True)
             for s in scenario_set]
    _atomic_write(path, ''.join(line + '\n' for line in lines))
    meta = {'v': FORMAT_VERSION, 'count': len(scenario_set),
            'seed': scenario_set.seed,
            'generator_config': scenario_set.generator_config}
    _atomic_write(meta_path(path), json.dumps(meta, indent=2, sort_keys=True))


def read_scenarios(path):
    """Reads a scenario file; nothing is returned unless every line parses."""
    scenarios = []
    with open(path, encoding='utf-8') as fd:
        text = fd.read()
    for line_no, line in enumerate(text.split('\n'), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except ValueError as exc:
            raise ScenarioParseError('invalid JSON: %s' % exc, line_no)
        scenarios.append(scenario_from_dict(data, line_no))
    if text and not text.endswith('\n'):
        raise ScenarioParseError('file does not end with a newline '
                                 '(truncated?)', text.count('\n') + 1)
    seed, gen_config = None, None
    meta_file = meta_path(path)
    if os.path.exists(meta_file):
        with open(meta_file, encoding='utf-8') as fd:
            try:
                meta = json.load(fd)
            except ValueError as exc:
                raise ScenarioParseError('invalid meta JSON: %s' % exc)
        if meta.get('v') != FORMAT_VERSION:
            raise ScenarioVersionError('unsupported meta version %r' %
                                       meta.get('v'), field='v')
        if meta.get('count') != len(scenarios):
            raise ScenarioParseError('meta lists %r scenarios, file has %d '
                                     '(truncated?)' %
                                     (meta.get('count'), len(scenarios)),
                                     field='count')
        seed, gen_config = meta.get('seed'), meta.get('generator_config')
    try:
        return ScenarioSet(tuple(scenarios), seed=seed,
                           generator_config=gen_config)
    except ArgumentError as exc:
        raise ScenarioParseError(str(exc))

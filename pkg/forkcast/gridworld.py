"""Grid geometry: quantization, cell centers, offset targets and the
8-connected scene graph.

Cells are half-open rectangles ``[low, high)`` on both axes; cell index
``i`` maps to ``(r, c)`` in row-major order. Rows grow with ``y`` and
columns with ``x``.
"""
import logging
import math
from collections import namedtuple
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from forkcast.errors import ConfigError, GridRangeError

logger = logging.getLogger(__name__)

Point2 = namedtuple('Point2', 'x y')
CellIndex = int

# (dr, dc) in row-major order, so clipped neighbor lists come out sorted.
MOORE_OFFSETS = ((-1, -1), (-1, 0), (-1, 1),
                 (0, -1), (0, 1),
                 (1, -1), (1, 0), (1, 1))

BBOX_RTOL = 1e-9


@dataclass(frozen=True)
class GridSpec(object):
    rows: int
    cols: int
    origin: Tuple[float, float] = (0.0, 0.0)
    cell_w: float = 1.0
    cell_h: float = 1.0
    scale_id: int = 0

    def __post_init__(self):
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise ConfigError('grid rows/cols must be integers, got %rx%r' %
                              (self.rows, self.cols))
        if self.rows < 2 or self.cols < 2:
            raise ConfigError('grid must be at least 2x2, got %dx%d' %
                              (self.rows, self.cols))
        if not (self.cell_w > 0 and self.cell_h > 0):
            raise ConfigError('cell extents must be positive, got (%r, %r)' %
                              (self.cell_w, self.cell_h))
        object.__setattr__(self, 'origin', (float(self.origin[0]),
                                            float(self.origin[1])))

    @classmethod
    def covering(cls, rows, cols, width, height, origin=(0.0, 0.0),
                 scale_id=0):
        """Grid of ``rows x cols`` cells spanning a ``width x height`` box."""
        return cls(rows, cols, origin, float(width) / cols,
                   float(height) / rows, scale_id)

    @property
    def size(self):
        return self.rows * self.cols

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def bbox(self):
        """(x_min, y_min, x_max, y_max) of the covered area."""
        ox, oy = self.origin
        return (ox, oy, ox + self.cols * self.cell_w,
                oy + self.rows * self.cell_h)

    @property
    def cell_diagonal(self):
        return math.hypot(self.cell_w, self.cell_h)

    def rescaled(self, rows, cols, scale_id):
        """Grid over the same bounding box with a different resolution."""
        x0, y0, x1, y1 = self.bbox
        return GridSpec.covering(rows, cols, x1 - x0, y1 - y0, self.origin,
                                 scale_id)

    def to_dict(self):
        return {'rows': self.rows, 'cols': self.cols,
                'origin': [self.origin[0], self.origin[1]],
                'cell': [self.cell_w, self.cell_h],
                'scale_id': self.scale_id}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data['rows']), int(data['cols']),
                   tuple(data['origin']), float(data['cell'][0]),
                   float(data['cell'][1]), int(data.get('scale_id', 0)))


class BoundsCounter(object):
    """Counts points that had to be clamped onto the grid."""

    def __init__(self):
        self.clamped = 0

    def report(self, what):
        if self.clamped:
            logger.warning('clamped=%d what=%s', self.clamped, what)


def check_index(g, i):
    if not isinstance(i, (int, np.integer)) or not 0 <= i < g.size:
        raise GridRangeError('cell index %r outside [0, %d) for %dx%d grid' %
                             (i, g.size, g.rows, g.cols))
    return int(i)


def index_to_rc(g, i):
    i = check_index(g, i)
    return divmod(i, g.cols)


def rc_to_index(g, r, c):
    if not (0 <= r < g.rows and 0 <= c < g.cols):
        raise GridRangeError('cell (%d, %d) outside %dx%d grid' %
                             (r, c, g.rows, g.cols))
    return r * g.cols + c


def _axis_cell(value, low, extent, count, axis, strict, counter):
    if not math.isfinite(value):
        raise GridRangeError('%s coordinate %r is not finite' % (axis, value))
    k = int(math.floor((value - low) / extent))
    if 0 <= k < count:
        return k
    if strict:
        raise GridRangeError('%s coordinate %r outside [%r, %r)' %
                             (axis, value, low, low + count * extent))
    if counter is not None:
        counter.clamped += 1
    return min(max(k, 0), count - 1)


def quantize_point(g, p, strict=False, counter=None):
    """Returns the index of the cell containing ``p``.

    Args:
      g: the GridSpec.
      p: a Point2 or any (x, y) pair.
      strict: raise GridRangeError for out-of-bounds points instead of
          clamping them to the nearest border cell.
      counter: optional BoundsCounter incremented once per clamped axis.
    """
    ox, oy = g.origin
    c = _axis_cell(float(p[0]), ox, g.cell_w, g.cols, 'x', strict, counter)
    r = _axis_cell(float(p[1]), oy, g.cell_h, g.rows, 'y', strict, counter)
    return r * g.cols + c


def quantize_points(g, points, strict=False, counter=None):
    """Vectorized quantize_point over an (N, 2) array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise GridRangeError('non-finite coordinates in %d points' % len(pts))
    ox, oy = g.origin
    cols = np.floor((pts[:, 0] - ox) / g.cell_w).astype(np.int64)
    rows = np.floor((pts[:, 1] - oy) / g.cell_h).astype(np.int64)
    outside = (cols < 0) | (cols >= g.cols) | (rows < 0) | (rows >= g.rows)
    if np.any(outside):
        if strict:
            first = pts[np.argmax(outside)]
            raise GridRangeError('point (%r, %r) outside grid bbox %s' %
                                 (first[0], first[1], g.bbox))
        if counter is not None:
            counter.clamped += int(np.sum(cols < 0) + np.sum(cols >= g.cols) +
                                   np.sum(rows < 0) + np.sum(rows >= g.rows))
        cols = np.clip(cols, 0, g.cols - 1)
        rows = np.clip(rows, 0, g.rows - 1)
    return rows * g.cols + cols


def cell_center(g, i):
    r, c = index_to_rc(g, i)
    ox, oy = g.origin
    return Point2(ox + (c + 0.5) * g.cell_w, oy + (r + 0.5) * g.cell_h)


def cell_centers(g):
    """(rows, cols, 2) array of every cell center."""
    ox, oy = g.origin
    xs = ox + (np.arange(g.cols) + 0.5) * g.cell_w
    ys = oy + (np.arange(g.rows) + 0.5) * g.cell_h
    grid_x, grid_y = np.meshgrid(xs, ys)
    return np.stack([grid_x, grid_y], axis=-1)


def offset_targets(g, p):
    """(rows, cols, 2) array whose entry at cell i is ``p - cell_center(i)``."""
    p = np.asarray(p, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(p)):
        raise GridRangeError('offset target point %r is not finite' % (p,))
    return p[None, None, :] - cell_centers(g)


def neighbor_list(g, i):
    """Sorted 8-connected neighbors of cell ``i``, clipped at the border."""
    r, c = index_to_rc(g, i)
    out = []
    for dr, dc in MOORE_OFFSETS:
        rr, cc = r + dr, c + dc
        if 0 <= rr < g.rows and 0 <= cc < g.cols:
            out.append(rr * g.cols + cc)
    return out


@lru_cache(maxsize=64)
def neighbor_table(rows, cols):
    """Padded neighbor table for a ``rows x cols`` layout.

    Works for any positive size, including the degenerate 1x1 layout that a
    GridSpec refuses.

    Returns:
      (index, mask): int64 array (rows*cols, 8) with -1 where the neighbor
      falls off the grid, and the matching boolean validity mask.
    """
    index = np.full((rows * cols, len(MOORE_OFFSETS)), -1, dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            for k, (dr, dc) in enumerate(MOORE_OFFSETS):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    index[r * cols + c, k] = rr * cols + cc
    index.setflags(write=False)
    mask = index >= 0
    mask.setflags(write=False)
    return index, mask


def same_bbox(a, b):
    return all(math.isclose(x, y, rel_tol=BBOX_RTOL, abs_tol=BBOX_RTOL)
               for x, y in zip(a.bbox, b.bbox))


def rescale_cell(src, dst, i):
    """Maps a cell of ``src`` to the ``dst`` cell containing its center."""
    if not same_bbox(src, dst):
        raise ConfigError('grids cover different areas: %s vs %s' %
                          (src.bbox, dst.bbox))
    return quantize_point(dst, cell_center(src, i), strict=True)


def one_hot_cell(g, i, dtype=np.float64):
    out = np.zeros(g.shape, dtype=dtype)
    r, c = index_to_rc(g, i)
    out[r, c] = 1.0
    return out

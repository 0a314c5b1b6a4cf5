"""Small hand-built scenarios and models shared by the unit tests."""
import numpy as np

from forkcast.config import ModelConfig
from forkcast.gridworld import GridSpec, Point2
from forkcast.model import Model
from forkcast.scenegen import Scenario, SemanticMap

K_CLASSES = 5


def small_grid(rows=4, cols=4):
    return GridSpec.covering(rows, cols, float(cols), float(rows))


def small_scenario(rows=4, cols=4, h=3, futures=None, seed=0,
                   scenario_id='t0', view_tag='topdown', k_classes=K_CLASSES):
    grid = small_grid(rows, cols)
    coarse = grid.rescaled(rows // 2, cols // 2, scale_id=1)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k_classes, size=grid.shape)
    history = tuple(Point2(0.5 + t * 0.5, rows / 2.0 - 0.25)
                    for t in range(h))
    if futures is None:
        futures = (((1.7, 1.2), (2.4, 0.6), (3.3, 0.4)),
                   ((1.8, 2.6), (2.5, 3.2), (3.4, 3.6)))
    return Scenario(
        scenario_id=scenario_id, grid=grid, coarse_grid=coarse,
        semantic_maps=(SemanticMap(grid, labels, k_classes),),
        history=history,
        futures=tuple(tuple(Point2(*p) for p in f) for f in futures),
        destinations=tuple(Point2(*f[-1]) for f in futures if f),
        view_tag=view_tag, fps=2.5, max_pred_len=4)


def small_config(**changes):
    config = ModelConfig(scales=[[4, 4], [2, 2]], d_enc=3, d_dec=3, d_e=2,
                         kernel=3, k_classes=K_CLASSES, h=3, max_pred_len=4)
    return config.replace(**changes)


def small_model(seed=0, dtype=None, **changes):
    import torch
    return Model(small_config(**changes), seed=seed,
                 dtype=dtype or torch.float64)

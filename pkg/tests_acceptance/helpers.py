"""Scenario sets and short training runs shared by the acceptance tests."""
import numpy as np

from forkcast import inference, metrics, scenegen
from forkcast.config import GeneratorConfig, ModelConfig, TrainConfig
from forkcast.gridworld import GridSpec, Point2


def fork_config(**changes):
    base = GeneratorConfig(rows=12, cols=12, width=12.0, height=12.0, h=8,
                           j=2, destinations=2, max_pred_len=8, sigma=0.05,
                           obstacles=1)
    return base.replace(**changes)


def generated(config, seed, n):
    return list(scenegen.generate_scenario_set(config, seed, n))


def single_future(scenario):
    """The scenario with only its first future."""
    return scenario.with_futures([scenario.futures[0]])


def tiny_scenario():
    """4x4 walk from the left edge turning up towards the top right."""
    grid = GridSpec.covering(4, 4, 4.0, 4.0)
    labels = np.zeros(grid.shape, dtype=np.int64)
    labels[3, 0] = scenegen.BUILDING
    return scenegen.Scenario(
        scenario_id='tiny', grid=grid,
        coarse_grid=grid.rescaled(2, 2, scale_id=1),
        semantic_maps=(scenegen.SemanticMap(grid, labels),),
        history=(Point2(0.4, 2.2), Point2(0.9, 2.1), Point2(1.5, 2.0)),
        futures=((Point2(2.1, 1.6), Point2(2.7, 1.1), Point2(3.3, 0.6)),),
        destinations=(Point2(3.3, 0.6),), max_pred_len=3)


def model_config(grid_shape, k_classes=13, h=8, **changes):
    rows, cols = grid_shape
    config = ModelConfig(scales=[[rows, cols], [rows // 2, cols // 2]],
                         d_enc=16, d_dec=16, d_e=8, k_classes=k_classes, h=h)
    return config.replace(**changes)


def adam(epochs, **changes):
    return TrainConfig(optimizer='adam', lr=0.01,
                       epochs=epochs).replace(**changes)


def greedy_ade(model, scenario):
    """Greedy ADE averaged over the scenario's futures."""
    pred = inference.greedy_predict(model, scenario).trajectories[0]
    return float(np.mean([metrics.ade_fde(pred, gt)[0]
                          for gt in scenario.future_arrays()]))

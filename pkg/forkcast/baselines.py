"""Single-future linear baseline.

The next displacement is a linear function of the previous one,
``d_{t+1} = d_t A + b``, fitted by least squares over every consecutive
displacement pair of the training trajectories and rolled out
autoregressively from the end of the observed history.
"""
import logging

import numpy as np

from forkcast import log
from forkcast.errors import ArgumentError
from forkcast.inference import PredictionSet

logger = logging.getLogger(__name__)


def _pairs(points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    d = np.diff(points, axis=0)
    return d[:-1], d[1:]


class LinearBaseline(object):

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float64).reshape(2, 2)
        self.bias = np.asarray(bias, dtype=np.float64).reshape(2)

    def predict(self, history, steps):
        """``steps`` future points continuing ``history``."""
        history = np.asarray(history, dtype=np.float64).reshape(-1, 2)
        if len(history) < 2:
            raise ArgumentError('linear baseline needs at least two '
                                'observed points')
        if steps < 1:
            raise ArgumentError('steps must be >= 1, got %r' % steps)
        point, d = history[-1], history[-1] - history[-2]
        out = []
        for _ in range(steps):
            d = d.dot(self.weight) + self.bias
            point = point + d
            out.append(point)
        return np.asarray(out)

    def predict_scenario(self, scenario, k=1, steps=None):
        """PredictionSet holding the single rollout duplicated ``k`` times."""
        steps = steps or scenario.max_pred_len
        traj = self.predict(scenario.history_array(), steps)
        return PredictionSet(scenario.scenario_id, [traj] * k, [0.0] * k)

    def to_dict(self):
        return {'weight': self.weight.tolist(), 'bias': self.bias.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data['weight'], data['bias'])


def fit_linear(scenario_set, use_futures=True):
    """Least-squares fit over histories (and futures continuing them)."""
    xs, ys = [], []
    for s in scenario_set:
        tracks = [s.history_array()]
        if use_futures:
            tracks.extend(np.vstack([s.history_array(), f])
                          for f in s.future_arrays())
        for track in tracks:
            x, y = _pairs(track)
            xs.append(x)
            ys.append(y)
    x = np.vstack(xs) if xs else np.zeros((0, 2))
    if len(x) < 3:
        raise ArgumentError('linear baseline needs at least three '
                            'displacement pairs, got %d' % len(x))
    y = np.vstack(ys)
    design = np.hstack([x, np.ones((len(x), 1))])
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    residual = float(np.mean(np.sum((design.dot(coef) - y) ** 2, axis=1)))
    logger.info(log.kv(linear_pairs=len(x), residual=residual))
    return LinearBaseline(coef[:2], coef[2])

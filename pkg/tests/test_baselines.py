import dataclasses
from unittest import TestCase

import numpy as np

from forkcast import baselines
from forkcast.baselines import LinearBaseline
from forkcast.errors import ArgumentError
from forkcast.gridworld import Point2

import fixtures


class TestLinearBaseline(TestCase):
    def test_constant_velocity(self):
        identity = LinearBaseline(np.eye(2), np.zeros(2))
        out = identity.predict([(0.0, 0.0), (1.0, 0.5)], 3)
        self.assertEqual(out.tolist(), [[2.0, 1.0], [3.0, 1.5], [4.0, 2.0]])

    def test_bias_accumulates(self):
        still = LinearBaseline(np.zeros((2, 2)), (0.0, 1.0))
        out = still.predict([(0.0, 0.0), (5.0, 5.0)], 2)
        self.assertEqual(out.tolist(), [[5.0, 6.0], [5.0, 7.0]])

    def test_fit_recovers_linear_dynamics(self):
        weight = np.array([[0.9, 0.1], [-0.2, 0.8]])
        bias = np.array([0.05, -0.02])
        points, d = [np.zeros(2)], np.array([0.3, 0.4])
        for _ in range(10):
            points.append(points[-1] + d)
            d = d.dot(weight) + bias
        s = dataclasses.replace(
            fixtures.small_scenario(), history=tuple(Point2(*p) for p in points))
        fitted = baselines.fit_linear([s], use_futures=False)
        self.assertTrue(np.allclose(fitted.weight, weight, atol=1e-9))
        self.assertTrue(np.allclose(fitted.bias, bias, atol=1e-9))

    def test_prediction_set(self):
        s = fixtures.small_scenario()
        baseline = LinearBaseline(np.eye(2), np.zeros(2))
        pred = baseline.predict_scenario(s, k=3)
        self.assertEqual(pred.k, 3)
        self.assertEqual(pred.trajectories[0].shape, (s.max_pred_len, 2))
        self.assertTrue(np.array_equal(pred.trajectories[0],
                                       pred.trajectories[2]))

    def test_dict_round_trip(self):
        baseline = LinearBaseline([[1.0, 2.0], [3.0, 4.0]], [0.5, -0.5])
        back = LinearBaseline.from_dict(baseline.to_dict())
        self.assertTrue(np.array_equal(back.weight, baseline.weight))
        self.assertTrue(np.array_equal(back.bias, baseline.bias))

    def test_errors(self):
        baseline = LinearBaseline(np.eye(2), np.zeros(2))
        self.assertRaises(ArgumentError, baseline.predict, [(0.0, 0.0)], 2)
        self.assertRaises(ArgumentError, baseline.predict,
                          [(0.0, 0.0), (1.0, 1.0)], 0)
        s = fixtures.small_scenario(h=2)
        self.assertRaises(ArgumentError, baselines.fit_linear, [s],
                          use_futures=False)

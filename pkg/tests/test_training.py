import math
import os
import shutil
import tempfile
from unittest import TestCase, mock

import numpy as np
import torch

from forkcast import gridworld, nn_core, training
from forkcast.config import TrainConfig
from forkcast.errors import ArgumentError, ShapeError, TrainingError
from forkcast.model import Model
from forkcast.nn_core import ParameterStore

import fixtures


def smooth_l1(x):
    x = abs(x)
    return 0.5 * x * x if x < 1 else x - 0.5


def float64_config(**changes):
    return TrainConfig(dtype='float64', epochs=2).replace(**changes)


def scenarios():
    return [fixtures.small_scenario(seed=0, scenario_id='a'),
            fixtures.small_scenario(seed=1, scenario_id='b')]


class TestLossCls(TestCase):
    def test_one_hot_on_target_is_zero(self):
        belief = torch.zeros(4, 4, dtype=torch.float64)
        belief[1, 2] = 1.0
        self.assertEqual(float(training.loss_cls([belief], [6])), 0.0)

    def test_uniform(self):
        belief = torch.full((4, 4), 1.0 / 16, dtype=torch.float64)
        loss = training.loss_cls([belief] * 3, [0, 7, 15])
        self.assertAlmostEqual(float(loss), math.log(16), places=12)

    def test_zero_probability_is_clamped(self):
        belief = torch.zeros(4, 4, dtype=torch.float64)
        belief[0, 0] = 1.0
        loss = float(training.loss_cls([belief], [5]))
        self.assertAlmostEqual(loss, -math.log(training.PROB_CLAMP))

    def test_matches_loop(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            steps = int(rng.integers(1, 6))
            beliefs, cells, expected = [], [], 0.0
            for _ in range(steps):
                p = rng.random((3, 5))
                p /= p.sum()
                cell = int(rng.integers(0, 15))
                beliefs.append(torch.as_tensor(p))
                cells.append(cell)
                expected += -math.log(p[cell // 5, cell % 5])
            self.assertAlmostEqual(float(training.loss_cls(beliefs, cells)),
                                   expected / steps, places=10)

    def test_length_mismatch(self):
        belief = torch.full((2, 2), 0.25, dtype=torch.float64)
        self.assertRaises(ArgumentError, training.loss_cls, [belief], [0, 1])
        self.assertRaises(ArgumentError, training.loss_cls, [], [])


class TestLossReg(TestCase):
    def test_constant_error(self):
        grid = fixtures.small_grid(2, 2)
        point = (0.3, 1.6)
        target = torch.as_tensor(gridworld.offset_targets(grid, point))
        field = target + torch.tensor([0.5, 2.0], dtype=torch.float64)
        loss = training.loss_reg([field], [point], grid)
        self.assertAlmostEqual(float(loss), 1.625, places=12)

    def test_exact_offsets_are_free(self):
        grid = fixtures.small_grid()
        points = [(0.2, 0.9), (3.7, 2.2)]
        fields = [torch.as_tensor(gridworld.offset_targets(grid, p))
                  for p in points]
        self.assertEqual(float(training.loss_reg(fields, points, grid)), 0.0)

    def test_matches_loop(self):
        grid = fixtures.small_grid(3, 4)
        rng = np.random.default_rng(8)
        for _ in range(10):
            steps = int(rng.integers(1, 4))
            points = rng.uniform(0.0, 3.0, size=(steps, 2))
            fields = [rng.normal(0.0, 1.5, size=(3, 4, 2))
                      for _ in range(steps)]
            expected = 0.0
            for field, point in zip(fields, points):
                total = 0.0
                for i in range(grid.size):
                    r, c = gridworld.index_to_rc(grid, i)
                    q = gridworld.cell_center(grid, i)
                    total += smooth_l1(field[r, c, 0] - (point[0] - q.x))
                    total += smooth_l1(field[r, c, 1] - (point[1] - q.y))
                expected += total / grid.size
            loss = training.loss_reg([torch.as_tensor(f) for f in fields],
                                     points, grid)
            self.assertAlmostEqual(float(loss), expected / steps, places=10)

    def test_wrong_field_shape(self):
        grid = fixtures.small_grid()
        self.assertRaises(ShapeError, training.loss_reg,
                          [torch.zeros(2, 2, 2)], [(1.0, 1.0)], grid)


class TestTotalLoss(TestCase):
    def test_arithmetic(self):
        store = ParameterStore(dtype=torch.float64)
        total, parts = training.total_loss([(1.0, 2.0)], store, TrainConfig())
        self.assertAlmostEqual(float(total), 1.2, places=12)
        self.assertEqual(parts.l_wd, 0.0)
        self.assertAlmostEqual(parts.total, 1.2, places=12)

    def test_zero_parameters_have_no_decay(self):
        m = fixtures.small_model()
        for name, value in m.store.items():
            m.store.set_array(name, np.zeros(value.shape))
        _, parts = training.total_loss([(0.5, 0.5)], m.store, TrainConfig())
        self.assertEqual(parts.l_wd, 0.0)

    def test_scales_are_summed(self):
        store = ParameterStore(dtype=torch.float64)
        store.create('w', (2,), init='constant', value=1.0)
        config = TrainConfig(lambda1=0.5, lambda2=0.25)
        total, parts = training.total_loss([(1.0, 2.0), (3.0, 4.0)], store,
                                           config)
        self.assertEqual((parts.l_cls, parts.l_reg, parts.l_wd),
                         (4.0, 6.0, 2.0))
        self.assertLess(abs(float(total) - (4.0 + 3.0 + 0.5)), 1e-9)

    def test_gradient_matches_finite_differences(self):
        s = fixtures.small_scenario(seed=5)
        m = fixtures.small_model(seed=2)
        config = TrainConfig()

        def fragment(store):
            terms = training.example_terms(Model(m.config, store), s, 1)
            return training.total_loss(terms, store, config)[0]

        report = nn_core.grad_check(fragment, m.store, fraction=0.05)
        self.assertTrue(report.passed, report)


class TestExampleTerms(TestCase):
    def test_one_pair_per_scale(self):
        terms = training.example_terms(fixtures.small_model(),
                                       fixtures.small_scenario(), 0)
        self.assertEqual(len(terms), 2)
        single = training.example_terms(
            fixtures.small_model(use_multi_scale=False),
            fixtures.small_scenario(), 0)
        self.assertEqual(len(single), 1)

    def test_regression_off_without_fine_decoder(self):
        terms = training.example_terms(
            fixtures.small_model(use_fine_decoder=False),
            fixtures.small_scenario(), 0)
        self.assertTrue(all(float(r) == 0.0 for _, r in terms))


class TestTrain(TestCase):
    def run_train(self, **changes):
        return training.train(scenarios(), fixtures.small_config(),
                              float64_config(**changes))

    def test_deterministic(self):
        a = self.run_train()
        b = self.run_train()
        self.assertEqual(a.history, b.history)
        for name, value in a.model.store.items():
            self.assertTrue(torch.equal(value, b.model.store[name]), name)

    def test_history_and_callback(self):
        seen = []
        result = training.train(
            scenarios(), fixtures.small_config(), float64_config(epochs=3),
            on_epoch=lambda epoch, parts, model, opt: seen.append(epoch))
        self.assertEqual(seen, [1, 2, 3])
        self.assertEqual(len(result.history), 3)
        self.assertEqual(result.epochs_run, 3)
        for parts in result.history:
            self.assertTrue(math.isfinite(parts.total))

    def test_weight_decay_shrinks_parameters(self):
        plain = self.run_train(lambda2=0.0, optimizer='sgd', lr=0.05,
                               epochs=3)
        decayed = self.run_train(lambda2=0.5, optimizer='sgd', lr=0.05,
                                 epochs=3)
        self.assertLess(float(decayed.model.store.sum_of_squares()),
                        float(plain.model.store.sum_of_squares()))

    def test_early_stop(self):
        result = self.run_train(epochs=5, patience=1, min_delta=1e9)
        self.assertEqual(result.epochs_run, 2)
        self.assertEqual(len(result.history), 2)

    def test_empty_set(self):
        self.assertRaises(ArgumentError, training.train, [],
                          fixtures.small_config(), float64_config())

    def test_divergence(self):
        real = training.example_terms
        calls = []

        def poisoned(model, scenario, j, strict=False):
            calls.append(j)
            terms = real(model, scenario, j)
            if len(calls) > 4:
                nan = torch.tensor(float('nan'), dtype=model.dtype)
                return [(c * nan, r) for c, r in terms]
            return terms

        with mock.patch.object(training, 'example_terms', poisoned):
            with self.assertRaises(TrainingError) as ctx:
                self.run_train(epochs=3)
        # Two scenarios with two futures each: epoch 1 is clean.
        self.assertEqual(ctx.exception.epoch, 2)
        self.assertTrue(math.isfinite(ctx.exception.last_finite_loss))

    def test_resume_matches_straight_run(self):
        for optimizer in ('adadelta', 'adam'):
            straight = self.run_train(epochs=4, optimizer=optimizer)
            config = float64_config(optimizer=optimizer)
            first = training.train(scenarios(), fixtures.small_config(),
                                   config)
            state = training.optimizer_arrays(first.optimizer,
                                              first.model.store, config)
            resumed = training.train(
                scenarios(), train_config=config.replace(epochs=4),
                model=Model(first.model.config, first.model.store.copy()),
                start_epoch=2, optimizer_state=state)
            self.assertEqual(first.history + resumed.history,
                             straight.history)
            for name, value in straight.model.store.items():
                self.assertTrue(torch.equal(value, resumed.model.store[name]),
                                (optimizer, name))


class TestLossLog(TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.path = os.path.join(self.tmp, 'loss.csv')

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_round_trip_and_append(self):
        rows = [training.LossBreakdown(1.5, 0.25, 3.0, 1.528),
                training.LossBreakdown(1.0 / 3, 0.1, 2.0, 0.345)]
        training.write_loss_log(rows[:1], self.path)
        training.write_loss_log(rows[1:], self.path, start_epoch=1,
                                append=True)
        self.assertEqual(training.read_loss_log(self.path), rows)
        with open(self.path) as fd:
            lines = fd.read().splitlines()
        self.assertEqual(lines[0], 'epoch,l_cls,l_reg,l_wd,total')
        self.assertTrue(lines[2].startswith('2,'))

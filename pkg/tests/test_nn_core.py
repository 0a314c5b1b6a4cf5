from unittest import TestCase

import numpy as np
import torch
from hypothesis import given, settings, strategies as st

from forkcast import gridworld, nn_core
from forkcast.errors import (ConfigError, GradCheckError, NumericError,
                             ShapeError)
from forkcast.nn_core import LayerSpec, ParameterStore

SEEDS = (0, 1, 2)


def randn(rng, *shape):
    return torch.as_tensor(rng.standard_normal(shape), dtype=torch.float64)


def store_with(seed, *specs):
    store = ParameterStore(seed, torch.float64)
    for prefix, spec in specs:
        spec.build(store, prefix)
    # Zero-initialized biases would hide bias gradients behind symmetric
    # activations; perturb every entry.
    rng = np.random.default_rng(seed + 100)
    for name, value in store.items():
        store.set_array(name, value.detach().numpy() +
                        0.1 * rng.standard_normal(value.shape))
    return store


class ScaleGrad(torch.autograd.Function):
    """Identity whose backward pass is off by one percent."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad * 1.01


class TestParameterStore(TestCase):
    def test_init_independent_of_creation_order(self):
        a = ParameterStore(5)
        a.create('x/weight', (3, 4))
        a.create('y/weight', (2, 2))
        b = ParameterStore(5)
        b.create('y/weight', (2, 2))
        b.create('x/weight', (3, 4))
        self.assertTrue(torch.equal(a['x/weight'], b['x/weight']))
        self.assertTrue(torch.equal(a['y/weight'], b['y/weight']))

    def test_seed_changes_values(self):
        a = ParameterStore(1)
        b = ParameterStore(2)
        self.assertFalse(torch.equal(a.create('w', (4,)), b.create('w', (4,))))

    def test_duplicate_and_bad_shapes(self):
        store = ParameterStore()
        store.create('w', (2,))
        self.assertRaises(ConfigError, store.create, 'w', (2,))
        self.assertRaises(ConfigError, store.create, 'v', (0, 2))

    def test_set_array_checks(self):
        store = ParameterStore()
        store.create('w', (2, 2))
        self.assertRaises(ShapeError, store.set_array, 'w', np.zeros(3))
        self.assertRaises(NumericError, store.set_array, 'w',
                          np.full((2, 2), np.inf))

    def test_to_is_a_deep_copy(self):
        store = ParameterStore()
        store.create('w', (2,), init='constant', value=1.5)
        other = store.to(torch.float64)
        with torch.no_grad():
            other['w'].fill_(0.0)
        self.assertEqual(store['w'].tolist(), [1.5, 1.5])
        self.assertEqual(other.dtype, torch.float64)

    def test_forget_bias(self):
        store = ParameterStore()
        LayerSpec('convrnn_cell', 2, 3, 3).build(store, 'cell')
        bias = store['cell/bias'].tolist()
        self.assertEqual(bias, [0.0] * 3 + [1.0] * 3 + [0.0] * 6)

    def test_sum_of_squares_skips_frozen(self):
        store = ParameterStore()
        store.create('a', (2,), init='constant', value=2.0)
        store.create('b', (3,), init='constant', value=5.0, trainable=False)
        self.assertEqual(float(store.sum_of_squares()), 8.0)

    def test_even_kernel_rejected(self):
        self.assertRaises(ConfigError, LayerSpec, 'conv2d', 1, 1, 2)


class TestConv2d(TestCase):
    def test_one_by_one_is_dense(self):
        rng = np.random.default_rng(0)
        x = randn(rng, 4, 5, 3)
        w = randn(rng, 2, 3, 1, 1)
        b = randn(rng, 2)
        out = nn_core.conv2d(x, w, b)
        dense = x @ w[:, :, 0, 0].T + b
        self.assertTrue(torch.allclose(out, dense, atol=1e-12))

    def test_identity_kernel(self):
        x = randn(np.random.default_rng(1), 4, 4, 2)
        w = torch.zeros(2, 2, 3, 3, dtype=torch.float64)
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        out = nn_core.conv2d(x, w, torch.zeros(2, dtype=torch.float64))
        self.assertTrue(torch.equal(out, x))

    def test_matches_loop(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 5, 2))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        expected = np.zeros((5, 5, 3))
        for r in range(5):
            for c in range(5):
                for o in range(3):
                    total = b[o]
                    for dr in range(3):
                        for dc in range(3):
                            rr, cc = r + dr - 1, c + dc - 1
                            if 0 <= rr < 5 and 0 <= cc < 5:
                                total += np.dot(w[o, :, dr, dc], x[rr, cc])
                    expected[r, c, o] = total
        out = nn_core.conv2d(torch.as_tensor(x), torch.as_tensor(w),
                             torch.as_tensor(b))
        self.assertLess(np.abs(out.numpy() - expected).max(), 1e-6)

    def test_channel_mismatch(self):
        self.assertRaises(ShapeError, nn_core.conv2d,
                          torch.zeros(3, 3, 2), torch.zeros(1, 3, 3, 3),
                          torch.zeros(1))


class TestConvRNN(TestCase):
    def test_zero_fixed_point(self):
        store = ParameterStore()
        store.create('cell/weight', (8, 3, 3, 3), init='zeros')
        store.create('cell/bias', (8,), init='zeros')
        zeros = torch.zeros(4, 4, 2)
        h, c = nn_core.convrnn_step(torch.zeros(4, 4, 1), zeros, zeros,
                                    store.scope('cell'))
        self.assertEqual(float(h.abs().max()), 0.0)
        self.assertEqual(float(c.abs().max()), 0.0)

    def test_hidden_bounded(self):
        rng = np.random.default_rng(3)
        store = store_with(3, ('cell', LayerSpec('convrnn_cell', 2, 3, 3)))
        h, _ = nn_core.convrnn_step(randn(rng, 4, 4, 2) * 10,
                                    randn(rng, 4, 4, 3), randn(rng, 4, 4, 3),
                                    store.scope('cell'))
        self.assertLess(float(h.abs().max()), 1.0)

    def test_non_finite_input(self):
        store = store_with(0, ('cell', LayerSpec('convrnn_cell', 1, 2, 3)))
        x = torch.full((3, 3, 1), float('nan'), dtype=torch.float64)
        z = torch.zeros(3, 3, 2, dtype=torch.float64)
        self.assertRaises(NumericError, nn_core.convrnn_step, x, z, z,
                          store.scope('cell'))

    def test_grad_check(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            store = store_with(seed,
                               ('cell', LayerSpec('convrnn_cell', 2, 3, 3)))
            x, h0, c0 = (randn(rng, 4, 4, 2), randn(rng, 4, 4, 3),
                         randn(rng, 4, 4, 3))
            wh, wc = randn(rng, 4, 4, 3), randn(rng, 4, 4, 3)

            def fragment(s, x, h0, c0):
                h, c = nn_core.convrnn_step(x, h0, c0, s.scope('cell'))
                return (h * wh).sum() + (c * wc).sum()

            report = nn_core.grad_check(fragment, store, (x, h0, c0))
            self.assertTrue(report.passed, report)


def gat_oracle(hidden, context, params, form='additive'):
    rows, cols, d = hidden.shape
    g = gridworld.GridSpec(rows, cols)
    nodes = np.concatenate([hidden, context], axis=-1)
    w1, b1, w2, b2 = (params[k] for k in ('w1', 'b1', 'w2', 'b2'))
    out = hidden.copy()
    for i in range(g.size):
        r, c = divmod(i, cols)
        neighbors = [divmod(n, cols) for n in gridworld.neighbor_list(g, i)]
        total = np.zeros(d)
        for rr, cc in neighbors:
            pair = np.concatenate([nodes[r, c], nodes[rr, cc]])
            e = np.tanh(pair @ w1 + b1) @ w2 + b2
            if form == 'attention':
                e = e * hidden[rr, cc]
            total += e
        out[r, c] += total / len(neighbors)
    return out


class TestGat(TestCase):
    def _params(self, store):
        return {k: store['gat/' + k].detach().numpy() for k in
                ('w1', 'b1', 'w2', 'b2')}

    def test_zero_edges_is_identity(self):
        store = ParameterStore(0, torch.float64)
        LayerSpec('gat', 5, 3).build(store, 'gat')
        for name in ('gat/w1', 'gat/w2'):
            store.set_array(name, np.zeros(store[name].shape))
        rng = np.random.default_rng(0)
        hidden = randn(rng, 3, 3, 3)
        out = nn_core.gat_layer(hidden, randn(rng, 3, 3, 2),
                                store.scope('gat'))
        self.assertTrue(torch.equal(out, hidden))

    def test_single_cell(self):
        store = store_with(1, ('gat', LayerSpec('gat', 5, 3)))
        rng = np.random.default_rng(1)
        hidden = randn(rng, 1, 1, 3)
        out = nn_core.gat_layer(hidden, randn(rng, 1, 1, 2),
                                store.scope('gat'))
        self.assertTrue(torch.equal(out, hidden))

    def test_matches_loop(self):
        for form in ('additive', 'attention'):
            store = store_with(2, ('gat', LayerSpec('gat', 5, 3, form=form)))
            rng = np.random.default_rng(2)
            hidden, context = randn(rng, 3, 3, 3), randn(rng, 3, 3, 2)
            out = nn_core.gat_layer(hidden, context, store.scope('gat'), form)
            expected = gat_oracle(hidden.numpy(), context.numpy(),
                                  self._params(store), form)
            self.assertLess(np.abs(out.detach().numpy() - expected).max(),
                            1e-6)

    def test_grad_check(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            store = store_with(seed, ('gat', LayerSpec('gat', 5, 3, hidden=4)))
            hidden, context = randn(rng, 4, 4, 3), randn(rng, 4, 4, 2)
            weights = randn(rng, 4, 4, 3)

            def fragment(s, hidden, context):
                return (nn_core.gat_layer(hidden, context, s.scope('gat')) *
                        weights).sum()

            report = nn_core.grad_check(fragment, store, (hidden, context))
            self.assertTrue(report.passed, report)


class TestSpatialSoftmax(TestCase):
    def test_uniform(self):
        out = nn_core.spatial_softmax(torch.full((4, 4), 0.3,
                                                 dtype=torch.float64))
        self.assertTrue(torch.allclose(out, torch.full((4, 4), 1 / 16.0,
                                                       dtype=torch.float64)))

    def test_shift_invariance(self):
        logits = randn(np.random.default_rng(4), 4, 5)
        a = nn_core.spatial_softmax(logits)
        b = nn_core.spatial_softmax(logits + 7.25)
        self.assertLess(float((a - b).abs().max()), 1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 16),
           st.floats(0.1, 30.0))
    def test_normalized_and_positive(self, rows, cols, seed, spread):
        logits = spread * randn(np.random.default_rng(seed), rows, cols)
        out = nn_core.spatial_softmax(logits)
        self.assertAlmostEqual(float(out.sum()), 1.0, places=12)
        self.assertTrue(bool((out >= 0).all()))

    def test_saturation(self):
        logits = torch.zeros(4, 4, dtype=torch.float64)
        logits[2, 1] = 50.0
        self.assertGreaterEqual(float(nn_core.spatial_softmax(logits)[2, 1]),
                                1 - 1e-15)

    def test_nan(self):
        logits = torch.zeros(2, 2)
        logits[0, 0] = float('nan')
        self.assertRaises(NumericError, nn_core.spatial_softmax, logits)

    def test_log_softmax_agrees(self):
        logits = randn(np.random.default_rng(5), 3, 3)
        self.assertTrue(torch.allclose(
            nn_core.log_spatial_softmax(logits).exp(),
            nn_core.spatial_softmax(logits), atol=1e-14))


class TestEmbedBelief(TestCase):
    def test_zero_weights(self):
        store = ParameterStore(0, torch.float64)
        store.create('e/weight', (4,), init='zeros')
        store.create('e/bias', (4,), init='zeros')
        belief = torch.full((3, 3), 1 / 9.0, dtype=torch.float64)
        out = nn_core.embed_belief(belief, store.scope('e'))
        self.assertEqual(float(out.abs().max()), 0.0)

    def test_locality_and_loop(self):
        store = store_with(6, ('e', LayerSpec('embed', 1, 4)))
        w = store['e/weight'].detach().numpy()
        b = store['e/bias'].detach().numpy()
        belief = torch.full((3, 3), 1 / 9.0, dtype=torch.float64)
        moved = belief.clone()
        moved[0, 0] += moved[2, 2]
        moved[2, 2] = 0.0
        a = nn_core.embed_belief(belief, store.scope('e')).detach().numpy()
        m = nn_core.embed_belief(moved, store.scope('e')).detach().numpy()
        changed = np.abs(a - m).max(axis=-1) > 0
        self.assertEqual(np.argwhere(changed).tolist(), [[0, 0], [2, 2]])
        for r in range(3):
            for c in range(3):
                expected = float(moved[r, c]) * w + b
                self.assertLess(np.abs(m[r, c] - expected).max(), 1e-12)


class TestGradCheck(TestCase):
    def _dense_store(self):
        return store_with(0, ('lin', LayerSpec('dense', 3, 2)))

    def test_linear_squared_loss(self):
        rng = np.random.default_rng(7)
        x, y = randn(rng, 5, 3), randn(rng, 5, 2)

        def fragment(s, x, y):
            return ((nn_core.dense(x, s.scope('lin')) - y) ** 2).sum()

        report = nn_core.grad_check(fragment, self._dense_store(), (x, y),
                                    tolerance=1e-8)
        self.assertTrue(report.passed, report)
        self.assertEqual(report.checked, 8)

    def test_corrupted_gradient_fails(self):
        rng = np.random.default_rng(8)
        x, y = randn(rng, 5, 3), randn(rng, 5, 2)

        def fragment(s, x, y):
            out = ScaleGrad.apply(nn_core.dense(x, s.scope('lin')))
            return ((out - y) ** 2).sum()

        report = nn_core.grad_check(fragment, self._dense_store(), (x, y))
        self.assertFalse(report.passed)
        self.assertGreater(report.max_rel_error, 1e-3)

    def test_non_deterministic_fragment(self):
        calls = []

        def fragment(s):
            calls.append(1)
            return s['lin/weight'].sum() * len(calls)

        self.assertRaises(GradCheckError, nn_core.grad_check, fragment,
                          self._dense_store())

    def test_leaves_store_untouched(self):
        store = self._dense_store()
        before = store.to_arrays()
        nn_core.grad_check(lambda s: (s['lin/weight'] ** 2).sum(), store,
                           fraction=0.5)
        for name, value in store.to_arrays().items():
            self.assertTrue(np.array_equal(value, before[name]))


class TestAvgPool(TestCase):
    def test_pools_blocks(self):
        x = torch.arange(16, dtype=torch.float64).reshape(4, 4, 1)
        out = nn_core.avg_pool(x, 2)
        self.assertEqual(out[..., 0].tolist(), [[2.5, 4.5], [10.5, 12.5]])

#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
unit tests for the autodiff module
"""
import unittest
import numpy as np
import autodiff as ad
from autodiff import Tensor, Parameter
from tools import DimensionError, ContractError, NumericError, DegenerateMaskError

# op-level checks; the floor keeps near-zero gradients from amplifying finite difference noise
OP_FLOOR = 1e-3
OP_TOLERANCE = 1e-5


def weighted_sum(out, seed = 1):
    """
    Scalar ``sum(out * w)`` with fixed positive weights so that every output element gets a distinct gradient
    """
    w = np.random.default_rng(seed).uniform(0.5, 1.5, size = out.shape)
    return(ad.sum(out * w))


class TestBackward(unittest.TestCase):
    def test_sum_gives_ones(self):
        x = Parameter(np.random.default_rng(0).normal(size = (2, 3, 4)))
        ad.backward(ad.sum(x))
        self.assertTrue(np.array_equal(x.grad, np.ones((2, 3, 4))))

    def test_square_closed_form(self):
        x = Parameter([3.0])
        ad.backward(ad.sum(x * x))
        self.assertTrue(np.allclose(x.grad, [6.0]))

    def test_gradients_accumulate(self):
        x = Parameter([3.0])
        ad.backward(ad.sum(x * x))
        ad.backward(ad.sum(x * x))
        self.assertTrue(np.allclose(x.grad, [12.0]))
        x.zero_grad()
        self.assertTrue(np.array_equal(x.grad, [0.0]))

    def test_shared_node_gradient(self):
        x = Parameter([2.0])
        y = x * x
        ad.backward(ad.sum(y + y))
        self.assertTrue(np.allclose(x.grad, [8.0]))

    def test_non_scalar_loss(self):
        x = Parameter([1.0, 2.0])
        with self.assertRaises(ContractError):
            ad.backward(x * 2.0)

    def test_no_grad_records_nothing(self):
        x = Parameter([1.0, 2.0])
        with ad.no_grad():
            y = ad.sum(x * 2.0)
        self.assertFalse(y.requires_grad)
        self.assertIsNone(y.op)

    def test_broadcast_gradient(self):
        x = Parameter(np.ones((3, 4)))
        b = Parameter(np.ones(4))
        ad.backward(ad.sum(x + b))
        self.assertTrue(np.array_equal(b.grad, np.full(4, 3.0)))

    def test_broadcast_mismatch(self):
        with self.assertRaises(DimensionError):
            ad.add(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))


class TestMatmul(unittest.TestCase):
    def test_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        self.assertTrue(np.array_equal(out.data, [[11.0]]))

    def test_inner_dimension_mismatch(self):
        with self.assertRaises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_backward_closed_form(self):
        rng = np.random.default_rng(0)
        a = Parameter(rng.normal(size = (3, 4)))
        b = Parameter(rng.normal(size = (4, 2)))
        ad.backward(ad.sum(ad.matmul(a, b)))
        g = np.ones((3, 2))
        self.assertTrue(np.allclose(a.grad, g @ b.data.T))
        self.assertTrue(np.allclose(b.grad, a.data.T @ g))

    def test_finite_differences(self):
        rng = np.random.default_rng(1)
        a = Parameter(rng.normal(size = (3, 4)))
        b = Parameter(rng.normal(size = (4, 5)))
        err = ad.grad_check(lambda: ad.sum(ad.matmul(a, b)), [a])
        self.assertLess(err, 1e-6)

    def test_batched(self):
        rng = np.random.default_rng(2)
        a = Parameter(rng.normal(size = (2, 3, 4)))
        b = Parameter(rng.normal(size = (4, 5)))
        err = ad.grad_check(lambda: weighted_sum(ad.matmul(a, b)), [a, b], floor = OP_FLOOR)
        self.assertLess(err, OP_TOLERANCE)


class TestOpGradients(unittest.TestCase):
    """
    Every differentiable operation against central finite differences
    """
    def setUp(self):
        self.rng = np.random.default_rng(42)

    def check(self, fn, *params):
        err = ad.grad_check(lambda: weighted_sum(fn(*params)), list(params), floor = OP_FLOOR)
        self.assertLess(err, OP_TOLERANCE)

    def test_elementwise(self):
        a = Parameter(self.rng.normal(size = (3, 4)))
        b = Parameter(self.rng.uniform(0.5, 2.0, size = (3, 4)))
        self.check(ad.add, a, b)
        self.check(ad.sub, a, b)
        self.check(ad.mul, a, b)
        self.check(ad.div, a, b)
        self.check(ad.neg, a)
        self.check(ad.exp, a)
        self.check(ad.gelu, a)
        self.check(ad.log, b)
        self.check(ad.sqrt, b)
        self.check(lambda x: ad.power(x, 3), b)

    def test_shape_ops(self):
        a = Parameter(self.rng.normal(size = (2, 3, 4)))
        b = Parameter(self.rng.normal(size = (2, 2, 4)))
        self.check(lambda x: ad.reshape(x, (6, 4)), a)
        self.check(lambda x: ad.transpose(x, (2, 0, 1)), a)
        self.check(lambda x, y: ad.concat([x, y], axis = 1), a, b)
        self.check(lambda x: ad.gather(x, [2, 0, 2], axis = 1), a)
        self.check(lambda x: ad.getitem(x, (slice(None), 1, slice(1, 3))), a)
        self.check(lambda x: ad.getitem(x, (slice(None), [0, 0, 2])), a)
        idx = np.array([[[2], [0]], [[1], [1]]])
        self.check(lambda x: ad.take_along_axis(x, idx, axis = 1), a)

    def test_reductions(self):
        a = Parameter(self.rng.normal(size = (3, 4)))
        self.check(lambda x: ad.sum(x, axis = 1), a)
        self.check(lambda x: ad.mean(x, axis = 0, keepdims = True), a)
        self.check(lambda x: ad.mean(x), a)

    def test_softmax_family(self):
        a = Parameter(self.rng.normal(size = (3, 5)))
        self.check(lambda x: ad.softmax(x, axis = -1), a)
        self.check(lambda x: ad.log_softmax(x, axis = -1), a)
        labels = np.array([0, 4, 2])
        err = ad.grad_check(lambda: ad.cross_entropy(a, labels), [a], floor = OP_FLOOR)
        self.assertLess(err, OP_TOLERANCE)

    def test_layer_norm(self):
        x = Parameter(self.rng.normal(size = (2, 3, 6)))
        gamma = Parameter(self.rng.uniform(0.5, 1.5, size = 6))
        beta = Parameter(self.rng.normal(size = 6))
        self.check(ad.layer_norm, x, gamma, beta)

    def test_mse_masked(self):
        pred = Parameter(self.rng.normal(size = (2, 4, 3)))
        target = self.rng.normal(size = (2, 4, 3))
        mask = np.array([[1.0, 0.0, 1.0, 1.0], [0.0, 1.0, 0.0, 1.0]])[:, :, None]
        err = ad.grad_check(lambda: ad.mse_masked(pred, target, mask), [pred], floor = OP_FLOOR)
        self.assertLess(err, OP_TOLERANCE)

    def test_random_graphs(self):
        unary = [ad.gelu, ad.exp, lambda x: x * 0.5, ad.neg, lambda x: ad.softmax(x, axis = -1)]
        binary = [ad.add, ad.sub, ad.mul]
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = Parameter(rng.normal(0.0, 0.5, size = (3, 4)))
            y = Parameter(rng.normal(0.0, 0.5, size = (3, 4)))
            choices = [(int(rng.integers(2)), int(rng.integers(5)), int(rng.integers(3))) for _ in range(3)]
            def graph():
                a, b = x, y
                for kind, u, op in choices:
                    if kind == 0:
                        a, b = unary[u](a), a
                    else:
                        a, b = binary[op](a, b), a
                return(weighted_sum(a, seed = seed))
            err = ad.grad_check(graph, [x, y], floor = OP_FLOOR, seed = seed)
            self.assertLess(err, OP_TOLERANCE, 'graph {0}: {1}'.format(seed, choices))


class TestNumerics(unittest.TestCase):
    def test_softmax_large_inputs(self):
        out = ad.softmax(Tensor([1000.0, 1000.0]))
        self.assertTrue(np.allclose(out.data, [0.5, 0.5]))
        self.assertTrue(np.all(np.isfinite(out.data)))

    def test_softmax_rows_sum_to_one(self):
        out = ad.softmax(Tensor(np.random.default_rng(0).normal(size = (6, 7)) * 30.0), axis = -1)
        self.assertTrue(np.all(np.abs(out.data.sum(axis = -1) - 1.0) < 1e-9))

    def test_softmax_bad_axis(self):
        with self.assertRaises(DimensionError):
            ad.softmax(Tensor(np.ones((2, 3))), axis = 2)

    def test_mse_masked_value(self):
        out = ad.mse_masked(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]), np.array([1.0, 0.0]))
        self.assertEqual(out.item(), 1.0)

    def test_mse_masked_empty_mask(self):
        with self.assertRaises(DegenerateMaskError):
            ad.mse_masked(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]), np.zeros(2))

    def test_mse_masked_non_binary_mask(self):
        with self.assertRaises(ContractError):
            ad.mse_masked(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]), np.array([0.5, 1.0]))

    def test_cross_entropy_uniform(self):
        out = ad.cross_entropy(Tensor(np.zeros((2, 4))), [1, 3])
        self.assertAlmostEqual(out.item(), np.log(4.0), places = 12)

    def test_cross_entropy_shapes(self):
        with self.assertRaises(DimensionError):
            ad.cross_entropy(Tensor(np.zeros((2, 4))), [1, 3, 0])


class TestGradCheck(unittest.TestCase):
    def test_square(self):
        x = Parameter([3.0])
        err = ad.grad_check(lambda: ad.sum(x * x), [x])
        self.assertLess(err, 1e-8)

    def test_constant_function(self):
        x = Parameter([1.0, -2.0])
        err = ad.grad_check(lambda: ad.sum(Tensor([5.0])) + ad.sum(x) * 0.0, [x])
        self.assertEqual(err, 0.0)

    def test_bad_eps(self):
        x = Parameter([1.0])
        with self.assertRaises(ContractError):
            ad.grad_check(lambda: ad.sum(x), [x], eps = 1e-2)

    def test_detects_wrong_gradient(self):
        x = Parameter([0.3, 0.7])
        def broken(a):
            # forward of exp with the gradient of the identity
            return(ad._make(np.exp(a.data), (a,), lambda g: (g,), 'broken'))
        err = ad.grad_check(lambda: ad.sum(broken(x)), [x])
        self.assertGreater(err, 0.1)

    def test_parameters_restored(self):
        x = Parameter([0.3, 0.7])
        before = x.data.copy()
        ad.grad_check(lambda: ad.sum(ad.exp(x)), [x])
        self.assertTrue(np.array_equal(x.data, before))


class TestAdamW(unittest.TestCase):
    def test_zero_grad_no_decay(self):
        p = Parameter([1.0, -2.0])
        state = ad.AdamWState([p], lr = 0.1)
        ad.adamw_step([p], [np.zeros(2)], state)
        self.assertTrue(np.array_equal(p.data, [1.0, -2.0]))
        self.assertEqual(state.step, 1)

    def test_single_step_reference(self):
        p = Parameter([1.0, -2.0, 0.5])
        g = np.array([0.3, -0.02, 4.0])
        lr = 0.1
        state = ad.AdamWState([p], lr = lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8)
        ad.adamw_step([p], [g], state)
        # bias-corrected moments equal g and g^2 after one step
        expected = np.array([1.0, -2.0, 0.5]) - lr * g / (np.abs(g) + 1e-8)
        self.assertTrue(np.allclose(p.data, expected, rtol = 1e-12, atol = 1e-14))

    def test_weight_decay_shrinks(self):
        p = Parameter([2.0, -4.0])
        state = ad.AdamWState([p], lr = 0.1, weight_decay = 0.5)
        ad.adamw_step([p], [np.zeros(2)], state)
        self.assertTrue(np.allclose(p.data, np.array([2.0, -4.0]) * (1.0 - 0.1 * 0.5)))

    def test_nan_gradient(self):
        p = Parameter([1.0, 2.0])
        state = ad.AdamWState([p], lr = 0.1)
        with self.assertRaises(NumericError):
            ad.adamw_step([p], [np.array([np.nan, 0.0])], state)
        self.assertTrue(np.array_equal(p.data, [1.0, 2.0]))
        self.assertEqual(state.step, 0)

    def test_wrapper_lr(self):
        p = Parameter([1.0])
        opt = ad.AdamW([p], lr = 0.01)
        opt.lr = opt.lr * 0.5
        self.assertEqual(opt.state.lr, 0.005)

    def test_minimizes_quadratic(self):
        p = Parameter([3.0, -1.0])
        opt = ad.AdamW([p], lr = 0.05)
        for _ in range(500):
            opt.zero_grad()
            ad.backward(ad.sum(p * p))
            opt.step()
        self.assertTrue(np.all(np.abs(p.data) < 0.1))

    def test_digest_changes(self):
        p = Parameter([1.0])
        opt = ad.AdamW([p], lr = 0.01)
        before = opt.state.digest()
        p.grad[...] = 1.0
        opt.step()
        self.assertNotEqual(before, opt.state.digest())
        self.assertTrue(opt.state.digest().startswith('step=1;'))


if __name__ == "__main__":
    unittest.main()

import unittest
from unittest import TestCase
from unittest.mock import MagicMock, patch

import numpy as np

from engine import functional as F
from engine.functional import conv2d_raw, conv2d_transpose_raw
from engine.optim import AdamState, adam_step
from engine.prng import LANES, Xoshiro256, derive_seed
from engine.tensor import GraphError, NumericalError, ShapeError, Tensor, get_dtype, parameter, precision

LOGGED_MODULES = ("engine.tensor", "engine.functional", "engine.optim", "engine.prng")


def numeric_grad(fn, array, eps=1e-6):
    """Central differences of a scalar function of one array."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + eps
        upper = fn(array)
        array[index] = original - eps
        lower = fn(array)
        array[index] = original
        grad[index] = (upper - lower) / (2 * eps)
    return grad


class EngineTestCase(TestCase):

    def setUp(self):
        # Patch the loggers
        self.mock_logger = MagicMock()
        self.logger_patchers = [patch(f"{module}.logger", self.mock_logger) for module in LOGGED_MODULES]
        for patcher in self.logger_patchers:
            patcher.start()

    def tearDown(self):
        for patcher in self.logger_patchers:
            patcher.stop()

    def assertGradMatches(self, build, *arrays, tol=1e-6):
        """Compare autodiff gradients of ``build(*tensors)`` with central differences."""
        with precision(64):
            leaves = [parameter(a.copy()) for a in arrays]
            build(*leaves).backward()
            for i, leaf in enumerate(leaves):
                def scalar(values, i=i):
                    inputs = [Tensor(values if j == i else arrays[j]) for j in range(len(arrays))]
                    return build(*inputs).item()

                expected = numeric_grad(scalar, arrays[i].copy())
                np.testing.assert_allclose(leaf.grad, expected, rtol=tol, atol=tol)


class TestTensorGraph(EngineTestCase):

    def test_default_precision_is_32_bit(self):
        self.assertIs(get_dtype(), np.float32)
        self.assertEqual(Tensor([1.0, 2.0]).data.dtype, np.float32)

    def test_precision_context_restores(self):
        with precision(64):
            self.assertEqual(Tensor(1.0).data.dtype, np.float64)
        self.assertEqual(Tensor(1.0).data.dtype, np.float32)

    def test_backward_needs_scalar(self):
        x = parameter(np.ones(3))
        with self.assertRaises(GraphError):
            (x * 2.0).backward()

    def test_backward_twice_raises(self):
        x = parameter(np.ones(3))
        loss = F.sum(x * x)
        loss.backward()
        with self.assertRaises(GraphError):
            loss.backward()

    def test_gradients_accumulate_on_shared_leaf(self):
        with precision(64):
            x = parameter(np.array([1.0, -2.0, 3.0]))
            F.sum(x * x + x).backward()
            np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_arithmetic_gradients(self):
        rng = Xoshiro256(1)
        a, b = rng.normal((2, 3, 2, 2)), rng.uniform((2, 3, 2, 2), 0.5, 2.0)
        self.assertGradMatches(lambda x, y: F.sum((x - y) * x / y), a, b)

    def test_per_channel_broadcast_gradient(self):
        rng = Xoshiro256(2)
        x, c = rng.normal((2, 3, 2, 2)), rng.uniform(3, 0.5, 1.5)
        self.assertGradMatches(lambda t, s: F.sum(F.square(t * s + s)), x, c)

    def test_scalar_broadcast_gradient(self):
        rng = Xoshiro256(3)
        x, s = rng.normal((2, 3)), np.array(1.7)
        self.assertGradMatches(lambda t, k: F.mean(t * k), x, s)

    def test_incompatible_shapes_raise(self):
        with self.assertRaises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(4))

    def test_division_by_near_zero_names_index(self):
        with self.assertRaises(NumericalError) as ctx:
            Tensor(np.ones(3)) / Tensor(np.array([1.0, 0.0, 1.0]))
        self.assertIn("(1,)", str(ctx.exception))

    def test_abs_subgradient_at_zero(self):
        x = parameter(np.array([-1.0, 0.0, 2.0]))
        F.sum(F.abs(x)).backward()
        np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])

    def test_clip_gradient_outside_and_on_bounds(self):
        x = parameter(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]))
        F.sum(F.clip(x, 0.0, 1.0)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0, 0.0, 0.0])

    def test_softplus_and_log_gradients(self):
        x = Xoshiro256(4).normal(5)
        self.assertGradMatches(lambda t: F.sum(F.log(F.softplus(t) + 1.0)), x)

    def test_reduce_axes(self):
        x = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
        np.testing.assert_allclose(F.mean(x, axes=(0, 2)).data, np.arange(24).reshape(2, 3, 4).mean(axis=(0, 2)))
        with self.assertRaises(ShapeError):
            F.sum(x, axes=3)
        with self.assertRaises(ShapeError):
            F.sum(x, axes=(1, 1))

    def test_reshape_mismatch(self):
        with self.assertRaises(ShapeError):
            F.reshape(Tensor(np.ones(6)), (4, 2))

    def test_channel_mix_gradient(self):
        rng = Xoshiro256(5)
        x, m = rng.normal((1, 3, 2, 2)), rng.normal((3, 3))
        self.assertGradMatches(lambda t, w: F.sum(F.square(F.channel_mix(t, w))), x, m)


class TestConvolution(EngineTestCase):

    def test_conv2d_output_shape(self):
        out = F.conv2d(Tensor(np.ones((2, 3, 8, 8))), Tensor(np.ones((5, 3, 4, 4))), stride=2, pad=1)
        self.assertEqual(out.shape, (2, 5, 4, 4))

    def test_conv2d_transpose_output_shape(self):
        out = F.conv2d_transpose(Tensor(np.ones((1, 5, 4, 4))), Tensor(np.ones((5, 3, 4, 4))), stride=2, pad=1)
        self.assertEqual(out.shape, (1, 3, 8, 8))

    def test_conv2d_matches_direct_sum(self):
        rng = Xoshiro256(6)
        x, k = rng.normal((1, 2, 5, 5)), rng.normal((3, 2, 3, 3))
        out = conv2d_raw(x, k, 1, 0)
        expected = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    expected[0, o, i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * k[o])
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_transpose_is_adjoint(self):
        rng = Xoshiro256(7)
        x, k, y = rng.normal((1, 2, 6, 6)), rng.normal((3, 2, 4, 4)), rng.normal((1, 3, 3, 3))
        forward = np.sum(conv2d_raw(x, k, 2, 1) * y)
        adjoint = np.sum(x * conv2d_transpose_raw(y, k, 2, 1, out_hw=(6, 6)))
        self.assertAlmostEqual(forward, adjoint, places=10)

    def test_conv2d_gradients(self):
        rng = Xoshiro256(8)
        x, k, b = rng.normal((1, 2, 4, 4)), rng.normal((2, 2, 4, 4)), rng.normal(2)
        self.assertGradMatches(lambda t, w, c: F.sum(F.square(F.conv2d(t, w, c, stride=2, pad=1))), x, k, b)

    def test_conv2d_transpose_gradients(self):
        rng = Xoshiro256(9)
        x, k, b = rng.normal((1, 2, 2, 2)), rng.normal((2, 3, 4, 4)), rng.normal(3)
        self.assertGradMatches(
            lambda t, w, c: F.sum(F.square(F.conv2d_transpose(t, w, c, stride=2, pad=1))), x, k, b)

    def test_integer_convolution_is_exact(self):
        x = np.arange(32, dtype=np.int64).reshape(1, 2, 4, 4) - 16
        k = np.arange(32, dtype=np.int64).reshape(2, 2, 2, 4)[:, :, :, :2] - 8
        out = conv2d_raw(x, k, 1, 0)
        self.assertEqual(out.dtype, np.int64)
        self.assertEqual(int(out[0, 0, 0, 0]), int(np.sum(x[0, :, 0:2, 0:2] * k[0])))

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            F.conv2d(Tensor(np.ones((1, 3, 8, 8))), Tensor(np.ones((4, 2, 4, 4))))

    def test_kernel_larger_than_input(self):
        with self.assertRaises(ShapeError):
            F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))

    def test_invalid_stride(self):
        with self.assertRaises(ShapeError):
            F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=0)


class TestPrng(EngineTestCase):

    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(Xoshiro256(42).next_u64(10), Xoshiro256(42).next_u64(10))

    def test_different_seeds_differ(self):
        self.assertFalse(np.array_equal(Xoshiro256(1).next_u64(10), Xoshiro256(2).next_u64(10)))

    def test_request_size_is_independent_of_lanes(self):
        values = Xoshiro256(3).next_u64(LANES + 5)
        self.assertEqual(values.shape, (LANES + 5,))
        np.testing.assert_array_equal(values[:LANES], Xoshiro256(3).next_u64(LANES))

    def test_uniform_range(self):
        samples = Xoshiro256(4).random(1000)
        self.assertTrue(np.all(samples >= 0.0) and np.all(samples < 1.0))

    def test_normal_moments(self):
        samples = Xoshiro256(5).normal(20000)
        self.assertAlmostEqual(float(samples.mean()), 0.0, delta=0.05)
        self.assertAlmostEqual(float(samples.std()), 1.0, delta=0.05)

    def test_integers_range(self):
        values = Xoshiro256(6).integers(7, 500)
        self.assertTrue(np.all(values >= 0) and np.all(values < 7))
        with self.assertRaises(ValueError):
            Xoshiro256(6).integers(0, 1)

    def test_derive_seed_depends_on_labels(self):
        self.assertEqual(derive_seed(0, "train", 1), derive_seed(0, "train", 1))
        self.assertNotEqual(derive_seed(0, "train", 1), derive_seed(0, "train", 2))
        self.assertNotEqual(derive_seed(0, "train"), derive_seed(1, "train"))


class TestAdam(EngineTestCase):

    def test_first_step_moves_by_learning_rate(self):
        with precision(64):
            w = parameter(np.array([1.0, -1.0]))
            w.grad = np.array([0.5, -2.0])
            state = adam_step({"w": w}, AdamState(), lr=0.1)
        np.testing.assert_allclose(w.data, [0.9, -0.9], atol=1e-6)
        self.assertEqual(state.step, 1)
        self.assertIsNone(w.grad)

    def test_missing_gradient_is_zero(self):
        w = parameter(np.array([1.0]))
        adam_step({"w": w}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(w.data, [1.0])

    def test_non_finite_gradient_names_parameter(self):
        w = parameter(np.array([1.0]))
        w.grad = np.array([np.nan])
        with self.assertRaises(NumericalError) as ctx:
            adam_step({"g_a.conv0.kernel": w}, AdamState(), lr=0.1)
        self.assertIn("g_a.conv0.kernel", str(ctx.exception))

    def test_minimizes_quadratic(self):
        with precision(64):
            w = parameter(np.array([3.0, -2.0]))
            state = AdamState()
            for _ in range(500):
                F.sum(F.square(w)).backward()
                adam_step({"w": w}, state, lr=0.05)
        self.assertTrue(np.all(np.abs(w.data) < 0.1))


if __name__ == '__main__':
    unittest.main()

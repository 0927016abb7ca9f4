import math
import unittest
from unittest import TestCase
from unittest.mock import MagicMock, patch

import numpy as np

from codec.layers import (
    BETA_FLOOR,
    ClipNotCalibratedError,
    ClipParams,
    GdnParams,
    SlimGdnParams,
    clipped_relu,
    gdn_denominator,
    gdn_denominator_as_conv,
    gdn_forward,
    gdn_param_specs,
    igdn_forward,
    quantized_gdn_forward,
    quantized_slim_gdn_forward,
    slim_gdn_forward,
    softplus_inverse,
)
from engine import functional as F
from engine.prng import Xoshiro256
from engine.tensor import ShapeError, Tensor, parameter, precision
from quant.quantizer import make_spec


def random_gdn(channels, seed):
    rng = Xoshiro256(seed)
    return GdnParams.from_values(rng.uniform(channels, 0.5, 1.5), rng.uniform((channels, channels), 0.0, 0.2))


class TestLayers(TestCase):

    def setUp(self):
        # Patch the loggers
        self.mock_logger = MagicMock()
        self.layers_logger_patcher = patch('codec.layers.logger', self.mock_logger)
        self.layers_logger_patcher.start()

    def tearDown(self):
        self.layers_logger_patcher.stop()

    def test_reparameterization_round_trip(self):
        with precision(64):
            beta = np.array([1.0, 0.3, 2.5])
            gamma = np.array([[0.1, 0.0, 0.2], [0.05, 0.3, 0.0], [0.0, 0.0, 1.0]])
            p = GdnParams.from_values(beta, gamma)
            np.testing.assert_allclose(p.beta().data, beta, rtol=1e-9)
            np.testing.assert_allclose(p.gamma().data, gamma, atol=1e-12)

    def test_invalid_parameters(self):
        with self.assertRaises(ValueError):
            GdnParams.from_values(np.array([0.0, 1.0]), np.zeros((2, 2)))
        with self.assertRaises(ValueError):
            GdnParams.from_values(np.ones(2), -np.ones((2, 2)))
        with self.assertRaises(ShapeError):
            GdnParams.from_values(np.ones(2), np.zeros((3, 3)))

    def test_initial_parameters(self):
        with precision(64):
            p = GdnParams.initial(4)
            np.testing.assert_allclose(p.beta().data, np.ones(4), rtol=1e-9)
            np.testing.assert_allclose(np.diag(p.gamma().data), np.full(4, 0.01), rtol=1e-9)
        self.assertTrue(np.all(p.beta().data >= BETA_FLOOR))

    def test_softplus_inverse_large_values(self):
        np.testing.assert_allclose(softplus_inverse(np.array([40.0, 100.0])), [40.0, 100.0])

    def test_gdn_matches_formula(self):
        with precision(64):
            p = random_gdn(3, 1)
            x = Xoshiro256(2).normal((2, 3, 4, 4))
            out = gdn_forward(Tensor(x), p).data
            beta, gamma = p.beta().data, p.gamma().data
            denominator = beta.reshape(1, 3, 1, 1) + np.einsum("ij,njhw->nihw", gamma, np.abs(x))
            np.testing.assert_allclose(out, x / denominator, rtol=1e-12)

    def test_denominator_as_conv_matches_direct(self):
        with precision(64):
            p = random_gdn(4, 3)
            x = Tensor(Xoshiro256(4).normal((1, 4, 3, 3)))
            np.testing.assert_allclose(gdn_denominator_as_conv(x, p).data, gdn_denominator(x, p).data, rtol=1e-12)

    def test_igdn_multiplies(self):
        with precision(64):
            p = random_gdn(3, 5)
            x = Tensor(Xoshiro256(6).normal((1, 3, 2, 2)))
            np.testing.assert_allclose(igdn_forward(x, p).data, x.data * gdn_denominator(x, p).data, rtol=1e-12)

    def test_gdn_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            gdn_forward(Tensor(np.ones((1, 2, 4, 4))), GdnParams.initial(3))

    def test_gdn_parameter_gradients(self):
        with precision(64):
            x = Tensor(Xoshiro256(7).normal((1, 2, 2, 2)))
            p = random_gdn(2, 8)
            F.sum(F.square(gdn_forward(x, p))).backward()
            analytic = p.raw_gamma.grad.copy()
            raw = p.raw_gamma.data.copy()
            eps = 1e-6
            numeric = np.zeros_like(raw)
            for index in np.ndindex(raw.shape):
                values = []
                for delta in (eps, -eps):
                    shifted = raw.copy()
                    shifted[index] += delta
                    q = GdnParams(Tensor(p.raw_beta.data), Tensor(shifted))
                    values.append(F.sum(F.square(gdn_forward(x, q))).item())
                numeric[index] = (values[0] - values[1]) / (2 * eps)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)

    def test_slim_gdn_identity_affine(self):
        with precision(64):
            p = SlimGdnParams.from_gdn(random_gdn(3, 9))
            x = Tensor(Xoshiro256(10).normal((1, 3, 2, 2)))
            np.testing.assert_allclose(slim_gdn_forward(x, p).data, gdn_forward(x, p).data)

    def test_slim_gdn_affine(self):
        with precision(64):
            p = SlimGdnParams.from_gdn(random_gdn(2, 11), scale=np.array([2.0, 0.0]), bias=np.array([0.5, -1.0]))
            x = Tensor(Xoshiro256(12).normal((1, 2, 2, 2)))
            out = slim_gdn_forward(x, p).data
            np.testing.assert_allclose(out[:, 0], 2.0 * gdn_forward(x, p).data[:, 0] + 0.5)
            np.testing.assert_allclose(out[:, 1], np.full((1, 2, 2), -1.0))
        self.assertEqual(set(p.parameters()), {"raw_beta", "raw_gamma", "scale", "bias"})

    def test_clipped_relu(self):
        x = Tensor(np.array([-1.0, 0.5, 3.0]))
        np.testing.assert_array_equal(clipped_relu(x, 1.0).data, [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(clipped_relu(x, math.inf).data, [0.0, 0.5, 3.0])
        with self.assertRaises(ValueError):
            clipped_relu(x, 0.0)

    def test_clip_params(self):
        self.assertEqual(ClipParams.from_theta(2.0).theta, 2.0)
        self.assertTrue(ClipParams.from_theta(2.0).one_sided)
        self.assertFalse(ClipParams.unbounded().is_bounded)
        with self.assertRaises(ValueError):
            ClipParams(1.0, 1.0)
        with self.assertRaises(ValueError):
            ClipParams.from_theta(-1.0)

    def test_quantized_gdn_needs_clip(self):
        p = GdnParams.initial(2)
        spec_gamma, spec_beta = gdn_param_specs(p, 8)
        with self.assertRaises(ClipNotCalibratedError):
            quantized_gdn_forward(Tensor(np.ones((1, 2, 2, 2))), p, make_spec(-1.0, 1.0, 8), spec_gamma, spec_beta,
                                  None)

    def test_quantized_gdn_close_at_high_precision(self):
        with precision(64):
            p = random_gdn(3, 13)
            x = Tensor(Xoshiro256(14).uniform((1, 3, 4, 4), -1.0, 1.0))
            spec_gamma, spec_beta = gdn_param_specs(p, 16)
            clip = ClipParams(-1.0, 1.0)
            out = quantized_gdn_forward(x, p, make_spec(-1.0, 1.0, 16), spec_gamma, spec_beta, clip).data
            np.testing.assert_allclose(out, gdn_forward(x, p).data, atol=1e-3)
            inverse = quantized_gdn_forward(x, p, make_spec(-1.0, 1.0, 16), spec_gamma, spec_beta, clip,
                                            inverse=True).data
            np.testing.assert_allclose(inverse, igdn_forward(x, p).data, atol=1e-3)

    def test_quantized_gdn_applies_clip(self):
        with precision(64):
            p = random_gdn(2, 15)
            spec_gamma, spec_beta = gdn_param_specs(p, 16)
            clip = ClipParams(-0.5, 0.5)
            spec_x = make_spec(-0.5, 0.5, 16)
            big = quantized_gdn_forward(Tensor(np.full((1, 2, 1, 1), 10.0)), p, spec_x, spec_gamma, spec_beta, clip)
            edge = quantized_gdn_forward(Tensor(np.full((1, 2, 1, 1), 0.5)), p, spec_x, spec_gamma, spec_beta, clip)
            np.testing.assert_allclose(big.data, edge.data)

    def test_quantized_slim_gdn(self):
        with precision(64):
            p = SlimGdnParams.from_gdn(random_gdn(2, 16), scale=np.array([2.0, 1.0]), bias=np.array([0.0, 1.0]))
            x = Tensor(Xoshiro256(17).uniform((1, 2, 2, 2), -1.0, 1.0))
            spec_gamma, spec_beta = gdn_param_specs(p, 16)
            out = quantized_slim_gdn_forward(x, p, make_spec(-1.0, 1.0, 16), spec_gamma, spec_beta,
                                             ClipParams(-1.0, 1.0)).data
            np.testing.assert_allclose(out, slim_gdn_forward(x, p).data, atol=1e-3)

    def test_quantized_gdn_passes_gradient(self):
        p = GdnParams(parameter(softplus_inverse(np.ones(2) - BETA_FLOOR)), parameter(np.zeros((2, 2))))
        spec_gamma, spec_beta = gdn_param_specs(p, 8)
        x = parameter(np.full((1, 2, 2, 2), 0.25))
        out = quantized_gdn_forward(x, p, make_spec(-1.0, 1.0, 8), spec_gamma, spec_beta, ClipParams(-1.0, 1.0))
        F.sum(out).backward()
        self.assertIsNotNone(x.grad)
        self.assertIsNotNone(p.raw_gamma.grad)
        self.assertTrue(np.all(np.isfinite(p.raw_beta.grad)))


if __name__ == '__main__':
    unittest.main()

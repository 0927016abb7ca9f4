import math
import unittest
from unittest import TestCase
from unittest.mock import MagicMock, patch

import numpy as np
from scipy.special import ndtr

from codec.entropy import (
    EntropyProxy,
    latent_quantize_eval,
    latent_quantize_train,
    likelihood,
    rate_estimate,
)
from codec.model import (
    CLIPPED_RELU,
    CONV,
    EVAL,
    GDN,
    IGDN,
    LATENT_ID,
    QUANT_STUB,
    SLIM_GDN,
    TCONV,
    TRAIN,
    ModelConfig,
    ModelConfigError,
    UnboundSpecError,
    build_model,
    forward,
    input_spec,
    set_bit_widths,
)
from codec.train import (
    TrainConfig,
    TrainingDivergedError,
    eval_loss,
    eval_rd_point,
    rd_loss,
    sample_batch,
    train,
)
from engine import functional as F
from engine.prng import Xoshiro256
from engine.tensor import ShapeError, Tensor, parameter, precision
from storage.datasets import synth_dataset

LOGGED_MODULES = ("codec.model", "codec.train", "codec.entropy", "codec.layers", "engine.optim")

SMALL = {"N": 4, "M": 4, "depth": 2, "seed": 3}


class CodecTestCase(TestCase):

    def setUp(self):
        # Patch the loggers
        self.mock_logger = MagicMock()
        self.logger_patchers = [patch(f"{module}.logger", self.mock_logger) for module in LOGGED_MODULES]
        for patcher in self.logger_patchers:
            patcher.start()

    def tearDown(self):
        for patcher in self.logger_patchers:
            patcher.stop()


class TestModel(CodecTestCase):

    def test_relu_layout(self):
        model = build_model(ModelConfig(N=8, M=12, depth=2))
        self.assertEqual([layer.id for layer in model.layers],
                         ["g_a.conv0", "g_a.act0", "g_a.conv1", LATENT_ID, "g_s.tconv0", "g_s.act0", "g_s.tconv1"])
        self.assertEqual([layer.kind for layer in model.layers],
                         [CONV, CLIPPED_RELU, CONV, QUANT_STUB, TCONV, CLIPPED_RELU, TCONV])
        self.assertEqual(model.node("g_a.conv1").out_channels, 12)
        self.assertTrue(model.node("g_s.tconv0").latent_input)

    def test_gdn_layout(self):
        model = build_model({"N": 4, "M": 6, "depth": 3, "activation": "gdn"})
        kinds = [layer.kind for layer in model.layers]
        self.assertEqual(kinds.count(GDN), 2)
        self.assertEqual(kinds.count(IGDN), 2)
        self.assertEqual(len(model.quant_layers()), 10)

    def test_slim_layout(self):
        model = build_model({"N": 4, "M": 4, "activation": "gdn", "slim": True})
        self.assertEqual(model.node("g_a.act0").kind, SLIM_GDN)
        self.assertEqual(model.node("g_s.act0").kind, IGDN)

    def test_invalid_configs(self):
        for cfg in ({"depth": 5}, {"depth": 1}, {"N": 2}, {"activation": "tanh"},
                    {"activation": "relu", "slim": True}, {"width": 3}):
            with self.subTest(cfg=cfg), self.assertRaises(ModelConfigError):
                build_model(cfg)

    def test_initialization_is_seeded(self):
        a, b = build_model(SMALL), build_model(SMALL)
        c = build_model({**SMALL, "seed": 4})
        for name, tensor in a.parameters().items():
            np.testing.assert_array_equal(tensor.data, b.parameters()[name].data)
        self.assertFalse(np.array_equal(a.parameters()["g_a.conv0.kernel"].data,
                                        c.parameters()["g_a.conv0.kernel"].data))

    def test_parameter_names(self):
        names = list(build_model(SMALL).parameters())
        self.assertEqual(names[0], "g_a.conv0.kernel")
        self.assertEqual(names[-1], "entropy.log_scale")

    def test_copy_is_deep(self):
        model = build_model(SMALL)
        clone = model.copy()
        clone.node("g_a.conv0").params["kernel"].data[...] = 0.0
        self.assertFalse(np.all(model.node("g_a.conv0").params["kernel"].data == 0.0))

    def test_validate_detects_channel_mismatch(self):
        model = build_model(SMALL)
        model.node("g_a.conv1").hyper["in_channels"] = 5
        with self.assertRaises(ModelConfigError):
            model.validate()

    def test_forward_shapes(self):
        model = build_model(SMALL)
        out = forward(model, np.zeros((2, 3, 16, 16)))
        self.assertEqual(out.x_hat.shape, (2, 3, 16, 16))
        self.assertEqual(out.y.shape, (2, 4, 4, 4))
        np.testing.assert_array_equal(out.y_hat.data, np.rint(out.y.data))
        self.assertGreater(out.rate_bits.item(), 0.0)

    def test_forward_rejects_bad_sizes(self):
        model = build_model(SMALL)
        with self.assertRaises(ShapeError):
            forward(model, np.zeros((1, 3, 18, 16)))
        with self.assertRaises(ShapeError):
            forward(model, np.zeros((1, 1, 16, 16)))

    def test_train_mode_needs_rng(self):
        with self.assertRaises(ValueError):
            forward(build_model(SMALL), np.zeros((1, 3, 8, 8)), mode=TRAIN)

    def test_observer_sees_every_layer(self):
        model = build_model(SMALL)
        seen = []
        forward(model, np.zeros((1, 3, 8, 8)), mode=EVAL, observer=lambda node, x: seen.append((node.id, x.shape)))
        self.assertEqual([node_id for node_id, _ in seen], [layer.id for layer in model.layers])
        self.assertEqual(seen[0][1], (1, 3, 8, 8))

    def test_quantized_forward_needs_ranges(self):
        model = build_model(SMALL)
        set_bit_widths(model, 8)
        with self.assertRaises(UnboundSpecError):
            forward(model, np.zeros((1, 3, 8, 8)))

    def test_set_bit_widths_needs_every_layer(self):
        model = build_model(SMALL)
        with self.assertRaises(UnboundSpecError):
            set_bit_widths(model, {"g_a.conv0": 8})
        set_bit_widths(model, {layer.id: 6 for layer in model.quant_layers()})
        self.assertTrue(model.quantized)
        self.assertEqual({layer.bits for layer in model.quant_layers()}, {6})

    def test_latent_consumer_uses_unit_scale(self):
        model = build_model(SMALL)
        set_bit_widths(model, 8)
        spec = input_spec(model.node("g_s.tconv0"))
        self.assertEqual(float(spec.scale), 1.0)
        with self.assertRaises(UnboundSpecError):
            input_spec(model.node("g_a.conv1"))


class TestEntropy(CodecTestCase):

    def test_likelihood_of_zero(self):
        proxy = EntropyProxy.initial(1)
        p = likelihood(Tensor(np.zeros((1, 1, 1, 1))), proxy)
        self.assertAlmostEqual(p.item(), float(ndtr(0.5) - ndtr(-0.5)), places=6)

    def test_likelihood_sums_to_one(self):
        with precision(64):
            proxy = EntropyProxy(log_scale=parameter(np.array([math.log(2.0)])))
            grid = np.arange(-40, 41, dtype=np.float64).reshape(1, 1, -1, 1)
            self.assertAlmostEqual(float(np.sum(likelihood(Tensor(grid), proxy).data)), 1.0, places=6)

    def test_likelihood_is_floored(self):
        proxy = EntropyProxy.initial(1)
        p = likelihood(Tensor(np.full((1, 1, 1, 1), 100.0)), proxy)
        self.assertAlmostEqual(p.item(), proxy.p_min, places=15)

    def test_rate_of_zero_latent(self):
        with precision(64):
            proxy = EntropyProxy.initial(2)
            rate = rate_estimate(Tensor(np.zeros((1, 2, 3, 3))), proxy).item()
        self.assertAlmostEqual(rate, -18 * math.log2(float(ndtr(0.5) - ndtr(-0.5))), places=9)

    def test_rate_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            rate_estimate(Tensor(np.zeros((1, 3, 2, 2))), EntropyProxy.initial(2))

    def test_rate_gradients(self):
        with precision(64):
            y = Xoshiro256(1).normal((1, 2, 2, 2)) * 2.0
            proxy = EntropyProxy(log_scale=parameter(np.array([0.3, -0.2])))
            leaf = parameter(y.copy())
            rate_estimate(leaf, proxy).backward()
            eps = 1e-6
            for c in range(2):
                values = []
                for delta in (eps, -eps):
                    shifted = proxy.log_scale.data.copy()
                    shifted[c] += delta
                    values.append(rate_estimate(Tensor(y), EntropyProxy(Tensor(shifted))).item())
                self.assertAlmostEqual(proxy.log_scale.grad[c], (values[0] - values[1]) / (2 * eps), places=5)
            shifted = y.copy()
            shifted[0, 1, 0, 1] += eps
            upper = rate_estimate(Tensor(shifted), EntropyProxy(Tensor(proxy.log_scale.data))).item()
            shifted[0, 1, 0, 1] -= 2 * eps
            lower = rate_estimate(Tensor(shifted), EntropyProxy(Tensor(proxy.log_scale.data))).item()
            self.assertAlmostEqual(leaf.grad[0, 1, 0, 1], (upper - lower) / (2 * eps), places=5)

    def test_eval_rounding_half_even(self):
        out = latent_quantize_eval(Tensor(np.array([0.5, 1.5, 2.5, -0.5])))
        np.testing.assert_array_equal(out.data, [0.0, 2.0, 2.0, -0.0])

    def test_train_noise_bounded(self):
        y = Tensor(np.zeros((1, 2, 8, 8)))
        noisy = latent_quantize_train(y, Xoshiro256(5)).data
        self.assertTrue(np.all(noisy >= -0.5) and np.all(noisy < 0.5))
        self.assertGreater(float(np.std(noisy)), 0.2)


class TestTraining(CodecTestCase):

    def setUp(self):
        super().setUp()
        self.images = synth_dataset(3, 16, seed=1)

    def test_rd_loss_without_distortion(self):
        x = Tensor(np.full((1, 3, 2, 2), 0.5))
        self.assertAlmostEqual(rd_loss(x, x, Tensor(0.75), 0.01).item(), 0.75, places=6)

    def test_rd_loss_distortion_in_pixel_units(self):
        with precision(64):
            x = Tensor(np.zeros((1, 3, 2, 2)))
            x_hat = Tensor(np.full((1, 3, 2, 2), 1.0 / 255))
            self.assertAlmostEqual(rd_loss(x, x_hat, Tensor(0.0), 0.5).item(), 0.5)

    def test_rd_loss_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            rd_loss(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 4, 4))), Tensor(0.0), 0.01)

    def test_sample_batch(self):
        batch = sample_batch(self.images, 5, 8, Xoshiro256(2))
        self.assertEqual(batch.shape, (5, 3, 8, 8))
        with self.assertRaises(ShapeError):
            sample_batch(self.images, 1, 32, Xoshiro256(2))
        with self.assertRaises(ValueError):
            sample_batch([], 1, 8, Xoshiro256(2))

    def test_training_is_deterministic(self):
        cfg = TrainConfig(lmbda=0.01, lr=1e-3, batch=2, crop=8, iters=4, seed=7, log_every=2)
        first = train(build_model(SMALL), self.images, cfg)
        second = train(build_model(SMALL), self.images, cfg)
        self.assertEqual(first.losses, second.losses)
        self.assertEqual(len(first.losses), 4)
        self.assertEqual([i for i, _ in first.trace], [0, 2, 3])
        self.assertTrue(all(math.isfinite(loss) for loss in first.losses))

    def test_training_updates_parameters(self):
        model = build_model(SMALL)
        before = model.parameters()["g_a.conv0.kernel"].data.copy()
        train(model, self.images, TrainConfig(lmbda=0.01, lr=1e-3, batch=2, crop=8, iters=2, seed=0))
        self.assertFalse(np.array_equal(before, model.parameters()["g_a.conv0.kernel"].data))

    def test_divergence_names_iteration(self):
        cfg = TrainConfig(lmbda=0.01, batch=1, crop=8, iters=3)
        calls = []

        def extra_loss(_model):
            calls.append(1)
            return Tensor(math.nan) if len(calls) == 2 else None

        with self.assertRaises(TrainingDivergedError) as ctx:
            train(build_model(SMALL), self.images, cfg, extra_loss=extra_loss)
        self.assertIn("iteration 1", str(ctx.exception))

    def test_on_step_sees_every_iteration(self):
        steps = []
        train(build_model(SMALL), self.images, TrainConfig(lmbda=0.01, batch=1, crop=8, iters=3),
              on_step=lambda i, _model: steps.append(i))
        self.assertEqual(steps, [0, 1, 2])

    def test_empty_dataset(self):
        with self.assertRaises(ValueError):
            train(build_model(SMALL), [], TrainConfig(lmbda=0.01))

    def test_eval_rd_point(self):
        model = build_model(SMALL)
        point = eval_rd_point(model, self.images)
        self.assertGreater(point.bpp, 0.0)
        self.assertTrue(math.isfinite(point.psnr))
        loss = eval_loss(model, self.images, 0.01)
        self.assertGreater(loss, point.bpp)

    def test_extra_loss_gradient_reaches_parameters(self):
        model = build_model(SMALL)
        kernel = model.parameters()["g_a.conv0.kernel"]

        def extra_loss(m):
            return F.sum(F.square(m.parameters()["g_a.conv0.kernel"])) * 1e3

        before = float(np.abs(kernel.data).sum())
        train(model, self.images, TrainConfig(lmbda=1e-6, lr=1e-2, batch=1, crop=8, iters=5), extra_loss=extra_loss)
        self.assertLess(float(np.abs(kernel.data).sum()), before)


if __name__ == '__main__':
    unittest.main()

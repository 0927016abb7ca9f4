import math
import unittest
from unittest import TestCase
from unittest.mock import MagicMock, patch

import numpy as np

from codec.layers import ClipParams
from codec.model import CLIPPED_RELU, GDN_KINDS, build_model
from codec.train import TrainConfig
from draq.analysis import (
    CALIBRATION_COLUMNS,
    DISTRIBUTION_COLUMNS,
    calibration_report,
    distribution_report,
    heavy_tailed_sample,
    tensor_summary,
)
from draq.calibration import (
    ONE_SIDED,
    THETA_FLOOR,
    TWO_SIDED,
    CalibrationError,
    CalibStats,
    LayerStats,
    bind_activation_specs,
    calibrate,
    calibration_subset,
    clip_threshold,
    clip_thresholds,
    collect_activation_stats,
    k_from_lambda,
    weight_thresholds,
)
from draq.finetune import DraqConfig, draq_finetune, outlier_fraction, weight_reg_loss
from engine.prng import Xoshiro256
from quant.quantizer import SIGNED, UNSIGNED
from storage.datasets import synth_dataset

LOGGED_MODULES = ("draq.calibration", "draq.finetune", "draq.analysis", "codec.model", "codec.train")

SMALL = {"N": 4, "M": 4, "depth": 2, "seed": 1}


class DraqTestCase(TestCase):

    def setUp(self):
        # Patch the loggers
        self.mock_logger = MagicMock()
        self.logger_patchers = [patch(f"{module}.logger", self.mock_logger) for module in LOGGED_MODULES]
        for patcher in self.logger_patchers:
            patcher.start()
        self.images = synth_dataset(3, 16, seed=4)
        self.calib_set = calibration_subset(self.images, 8, 8)

    def tearDown(self):
        for patcher in self.logger_patchers:
            patcher.stop()


class TestStatistics(DraqTestCase):

    def test_layer_stats_of(self):
        stats = LayerStats.of(np.array([1.0, 2.0, 3.0, 6.0]))
        self.assertEqual((stats.mean, stats.min, stats.max, stats.count), (3.0, 1.0, 6.0, 4))
        self.assertAlmostEqual(stats.std, math.sqrt(3.5))

    def test_merge_matches_pooled_population(self):
        rng = Xoshiro256(1)
        a, b = rng.normal(100) * 2 + 1, rng.normal(37) - 3
        merged = LayerStats.of(a).merge(LayerStats.of(b))
        pooled = LayerStats.of(np.concatenate([a, b]))
        self.assertAlmostEqual(merged.mean, pooled.mean, places=12)
        self.assertAlmostEqual(merged.std, pooled.std, places=12)
        self.assertEqual((merged.min, merged.max, merged.count), (pooled.min, pooled.max, pooled.count))

    def test_merge_with_empty(self):
        stats = LayerStats.of(np.array([1.0, 2.0]))
        self.assertIs(LayerStats().merge(stats), stats)
        self.assertIs(stats.merge(LayerStats()), stats)

    def test_calibration_subset_order(self):
        crops = calibration_subset(self.images, 8, 6)
        self.assertEqual(len(crops), 6)
        np.testing.assert_array_equal(crops[0], self.images[0][:, :8, :8])
        np.testing.assert_array_equal(crops[1], self.images[0][:, :8, 8:])
        np.testing.assert_array_equal(crops[4], self.images[1][:, :8, :8])

    def test_calibration_subset_short_dataset(self):
        self.assertEqual(len(calibration_subset(self.images, 8, 100)), 12)

    def test_collect_needs_data(self):
        with self.assertRaises(CalibrationError):
            collect_activation_stats(build_model(SMALL), [])

    def test_collect_covers_every_layer(self):
        model = build_model(SMALL)
        stats = collect_activation_stats(model, self.calib_set)
        self.assertEqual(set(stats.activations), {layer.id for layer in model.layers})
        self.assertEqual(stats.sample_count, len(self.calib_set))
        self.assertEqual(stats.activations["g_a.conv0"].count, len(self.calib_set) * 3 * 8 * 8)


class TestThresholds(DraqTestCase):

    def test_k_from_lambda(self):
        self.assertAlmostEqual(k_from_lambda(0.0067), 6.1875)
        self.assertAlmostEqual(k_from_lambda(0.0483), 32.1875)
        with self.assertRaises(ValueError):
            k_from_lambda(0.0)

    def test_one_sided(self):
        stats = LayerStats(mean=1.0, std=0.5, min=-2.0, max=10.0, count=10)
        self.assertEqual(clip_threshold(stats, 2.0, ONE_SIDED).theta, 2.0)
        self.assertEqual(clip_threshold(stats, 100.0, ONE_SIDED).theta, 10.0)

    def test_two_sided(self):
        stats = LayerStats(mean=1.0, std=0.5, min=-0.2, max=10.0, count=10)
        clip = clip_threshold(stats, 2.0, TWO_SIDED)
        self.assertEqual((clip.lo, clip.hi), (0.0, 2.0))
        clip = clip_threshold(stats, 4.0, TWO_SIDED)
        self.assertEqual((clip.lo, clip.hi), (-0.2, 3.0))

    def test_infinite_k_is_unbounded(self):
        stats = LayerStats(mean=0.0, std=1.0, min=-5.0, max=5.0, count=10)
        self.assertTrue(math.isinf(clip_threshold(stats, math.inf, ONE_SIDED).theta))
        self.assertFalse(clip_threshold(stats, math.inf, TWO_SIDED).is_bounded)

    def test_degenerate_statistics_warn(self):
        stats = LayerStats(mean=0.0, std=0.0, min=0.0, max=0.0, count=10)
        clip = clip_threshold(stats, 3.0, ONE_SIDED, "g_a.act0")
        self.assertEqual(clip.theta, THETA_FLOOR)
        clip = clip_threshold(LayerStats(mean=0.5, std=0.0, min=0.5, max=0.5, count=3), 3.0, TWO_SIDED)
        self.assertAlmostEqual(clip.hi - clip.lo, THETA_FLOOR)
        self.assertEqual(self.mock_logger.warning.call_count, 2)

    def test_unknown_mode(self):
        with self.assertRaises(ValueError):
            clip_threshold(LayerStats(0.0, 1.0, -1.0, 1.0, 3), 2.0, "both")

    def test_clip_thresholds_missing_layer(self):
        stats = CalibStats(activations={"a": LayerStats(0.0, 1.0, -3.0, 3.0, 5)})
        self.assertEqual(clip_thresholds(stats, 0.01, TWO_SIDED, k_override=1.0)["a"].hi, 1.0)
        with self.assertRaises(CalibrationError):
            clip_thresholds(stats, 0.01, TWO_SIDED, layers=["b"])

    def test_weight_thresholds_small_tensor(self):
        self.assertEqual(weight_thresholds(np.array([3.0, -1.0, 2.0]), 0.001), (-1.0, 3.0))

    def test_weight_thresholds_percentiles(self):
        weights = np.arange(2000, dtype=np.float64)
        lo, hi = weight_thresholds(weights, 0.001)
        self.assertAlmostEqual(lo, 1.999)
        self.assertAlmostEqual(hi, 1997.001)
        with self.assertRaises(ValueError):
            weight_thresholds(weights, 0.5)


class TestCalibrate(DraqTestCase):

    def test_relu_model(self):
        model = build_model(SMALL)
        stats = calibrate(model, self.calib_set, 0.01, bits=8)
        self.assertTrue(model.quantized)
        act = model.node("g_a.act0")
        self.assertEqual(act.kind, CLIPPED_RELU)
        self.assertLessEqual(act.clip.theta, stats.activations["g_a.act0"].max)
        conv = model.node("g_a.conv1")
        self.assertEqual(conv.act_signedness, UNSIGNED)
        self.assertEqual(conv.act_range, (0.0, act.clip.theta))
        self.assertEqual(model.node("g_a.conv0").act_signedness, UNSIGNED)
        self.assertEqual(set(stats.weights), {"g_a.conv0", "g_a.conv1", "g_s.tconv0", "g_s.tconv1"})
        self.assertIsNone(model.node("g_s.tconv0").act_range)

    def test_gdn_model(self):
        model = build_model({**SMALL, "activation": "gdn"})
        calibrate(model, self.calib_set, 0.01, bits=8)
        for layer in model.layers:
            if layer.kind in GDN_KINDS:
                self.assertTrue(layer.clip.is_bounded)
                self.assertEqual(layer.act_range, (layer.clip.lo, layer.clip.hi))
                self.assertEqual(layer.act_signedness, SIGNED)

    def test_without_activation_clipping(self):
        model = build_model({**SMALL, "activation": "gdn"})
        stats = calibrate(model, self.calib_set, 0.01, clip_activations=False, bits=8)
        gdn = model.node("g_a.act0")
        self.assertFalse(gdn.clip.is_bounded)
        observed = stats.activations["g_a.act0"]
        self.assertEqual(gdn.act_range, (observed.min, observed.max))

    def test_k_override(self):
        model = build_model(SMALL)
        stats = calibrate(model, self.calib_set, 0.01, k_override=0.5, bits=8)
        observed = stats.activations["g_a.act0"]
        self.assertAlmostEqual(model.node("g_a.act0").clip.theta, min(observed.mean + 0.5 * observed.std,
                                                                      observed.max))

    def test_bind_needs_statistics(self):
        model = build_model(SMALL)
        with self.assertRaises(CalibrationError):
            bind_activation_specs(model, CalibStats(), bits=8)

    def test_rebinding_keeps_widths(self):
        model = build_model(SMALL)
        stats = calibrate(model, self.calib_set, 0.01, bits=6)
        bind_activation_specs(model, stats)
        self.assertEqual({layer.bits for layer in model.quant_layers()}, {6})


class TestFinetune(DraqTestCase):

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            DraqConfig(bits=1)
        with self.assertRaises(ValueError):
            DraqConfig(alpha=0.6)
        with self.assertRaises(ValueError):
            DraqConfig(recalib_period=0)
        self.assertEqual(DraqConfig().period(300), 30)
        self.assertEqual(DraqConfig().period(5), 1)
        self.assertEqual(DraqConfig(recalib_period=7).period(300), 7)
        baseline = DraqConfig.baseline(bits=4)
        self.assertFalse(baseline.clip_activations or baseline.regularize_weights)
        self.assertEqual(baseline.bits, 4)

    def test_weight_reg_loss(self):
        model = build_model(SMALL)
        thresholds = {layer.id: (-0.1, 0.1) for layer in model.layers if layer.kind in ("conv", "tconv")}
        expected = 0.0
        for layer_id in thresholds:
            w = model.node(layer_id).params["kernel"].data.astype(np.float64)
            expected += np.sum(np.maximum(w - 0.1, 0.0) + np.maximum(-0.1 - w, 0.0))
        self.assertAlmostEqual(weight_reg_loss(model, thresholds, 2.0).item(), 2.0 * expected, places=3)

    def test_weight_on_threshold_costs_nothing(self):
        model = build_model(SMALL)
        thresholds = {}
        for layer in model.layers:
            if layer.kind in ("conv", "tconv"):
                w = layer.params["kernel"].data
                thresholds[layer.id] = (float(w.min()), float(w.max()))
        self.assertEqual(weight_reg_loss(model, thresholds, 1.0).item(), 0.0)
        self.assertEqual(outlier_fraction(model, thresholds), 0.0)
        with self.assertRaises(CalibrationError):
            weight_reg_loss(model, {}, 1.0)

    def test_outlier_fraction(self):
        model = build_model(SMALL)
        thresholds = {layer.id: (0.0, 0.0) for layer in model.layers if layer.kind in ("conv", "tconv")}
        self.assertGreater(outlier_fraction(model, thresholds), 0.9)

    def test_finetune_recalibrates_on_schedule(self):
        model = build_model(SMALL)
        result = draq_finetune(model, self.images, TrainConfig(lmbda=0.01, batch=1, crop=8, iters=5, seed=2),
                               DraqConfig(recalib_period=2, bits=8), self.calib_set)
        self.assertIs(result.model, model)
        self.assertTrue(model.quantized)
        self.assertEqual(result.recalibrations, [2, 4])
        self.assertEqual(len(result.training.losses), 5)
        self.assertTrue(0.0 <= result.outliers_after <= 1.0)

    def test_finetune_is_deterministic(self):
        cfg = TrainConfig(lmbda=0.01, batch=1, crop=8, iters=3, seed=5)
        first = draq_finetune(build_model(SMALL), self.images, cfg, DraqConfig(), self.calib_set)
        second = draq_finetune(build_model(SMALL), self.images, cfg, DraqConfig(), self.calib_set)
        self.assertEqual(first.training.losses, second.training.losses)

    def test_keep_widths_needs_quantized_model(self):
        with self.assertRaises(CalibrationError):
            draq_finetune(build_model(SMALL), self.images, TrainConfig(lmbda=0.01, iters=1, crop=8),
                          DraqConfig(bits=None), self.calib_set)


class TestAnalysis(DraqTestCase):

    def test_gaussian_summary(self):
        summary = tensor_summary(Xoshiro256(3).normal(50000))
        self.assertAlmostEqual(summary["kurtosis"], 0.0, delta=0.1)
        self.assertLess(summary["outlier_fraction"], 0.001)

    def test_heavy_tailed_sample(self):
        sample = heavy_tailed_sample(10000, Xoshiro256(4), outlier_fraction=0.001, outlier_value=50.0)
        self.assertEqual(int(np.sum(np.abs(sample) == 50.0)), 10)
        summary = tensor_summary(sample)
        self.assertGreater(summary["kurtosis"], 10.0)
        self.assertGreater(summary["range_over_std"], 40.0)

    def test_constant_tensor_summary(self):
        summary = tensor_summary(np.full(10, 2.0))
        self.assertEqual((summary["std"], summary["kurtosis"], summary["outlier_fraction"]), (0.0, 0.0, 0.0))
        with self.assertRaises(ValueError):
            tensor_summary(np.zeros(0))

    def test_distribution_report(self):
        model = build_model(SMALL)
        rows = distribution_report(model, self.calib_set)
        self.assertTrue(all(list(row) == DISTRIBUTION_COLUMNS for row in rows))
        weights = [row["layer"] for row in rows if row["tensor"] == "weight"]
        self.assertEqual(weights, ["g_a.conv0", "g_a.conv1", "g_s.tconv0", "g_s.tconv1"])
        self.assertNotIn("latent", [row["layer"] for row in rows])

    def test_calibration_report(self):
        model = build_model(SMALL)
        stats = calibrate(model, self.calib_set, 0.01, bits=8)
        rows = calibration_report(model, stats)
        self.assertTrue(all(list(row) == CALIBRATION_COLUMNS for row in rows))
        by_layer = {row["layer"]: row for row in rows}
        self.assertEqual(by_layer["g_a.act0"]["clip_hi"], model.node("g_a.act0").clip.theta)
        self.assertEqual(by_layer["g_a.act0"]["theta_min"], "")
        self.assertEqual(by_layer["g_a.conv1"]["clip_lo"], "")
        self.assertEqual(by_layer["g_a.conv1"]["theta_max"], stats.weights["g_a.conv1"][1])


if __name__ == '__main__':
    unittest.main()

import math
import unittest
from unittest import TestCase
from unittest.mock import MagicMock, patch

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from codec.model import build_model, set_bit_widths
from draq.calibration import calibrate, calibration_subset
from engine.tensor import ShapeError
from evaluation.rd_metrics import (
    MSQE_COLUMNS,
    PSNR_INF,
    BDRateError,
    RDCurve,
    RDCurveError,
    RDPoint,
    bd_rate,
    msqe_rows,
    msqe_table,
    psnr,
)
from storage.datasets import synth_dataset

LOGGED_MODULES = ("evaluation.rd_metrics", "codec.model", "draq.calibration")


def curve(bpps, psnrs, label=""):
    return RDCurve([RDPoint(b, p) for b, p in zip(bpps, psnrs)], label)


REFERENCE = curve([0.1, 0.2, 0.4, 0.8], [28.0, 30.5, 33.0, 35.5])


class TestRDMetrics(TestCase):

    def setUp(self):
        # Patch the loggers
        self.mock_logger = MagicMock()
        self.logger_patchers = [patch(f"{module}.logger", self.mock_logger) for module in LOGGED_MODULES]
        for patcher in self.logger_patchers:
            patcher.start()

    def tearDown(self):
        for patcher in self.logger_patchers:
            patcher.stop()

    def test_psnr(self):
        x = np.zeros((3, 4, 4))
        self.assertEqual(psnr(x, x), PSNR_INF)
        self.assertAlmostEqual(psnr(x, np.ones((3, 4, 4)), peak=1.0), 0.0)
        self.assertAlmostEqual(psnr(x, np.ones((3, 4, 4))), 20 * math.log10(255.0))
        with self.assertRaises(ShapeError):
            psnr(x, np.zeros((3, 4, 5)))

    def test_curve_sorts_points(self):
        shuffled = curve([0.4, 0.1, 0.8, 0.2], [33.0, 28.0, 35.5, 30.5])
        np.testing.assert_array_equal(shuffled.bpp, REFERENCE.bpp)
        np.testing.assert_array_equal(shuffled.psnr, REFERENCE.psnr)

    def test_curve_validation(self):
        with self.assertRaises(RDCurveError):
            curve([0.1, 0.2, 0.4], [28.0, 30.0, 32.0])
        with self.assertRaises(RDCurveError):
            curve([0.1, 0.2, 0.4, 0.8], [28.0, 31.0, 30.0, 35.0])
        with self.assertRaises(RDCurveError):
            curve([0.1, 0.2, 0.2, 0.8], [28.0, 30.0, 31.0, 35.0])
        with self.assertRaises(RDCurveError):
            curve([0.0, 0.2, 0.4, 0.8], [28.0, 30.0, 32.0, 35.0])
        with self.assertRaises(RDCurveError):
            curve([0.1, 0.2, 0.4, 0.8], [28.0, 30.0, 32.0, math.inf])
        with self.assertRaises(RDCurveError):
            RDPoint(-0.1, 30.0)
        with self.assertRaises(RDCurveError):
            RDPoint(0.1, math.nan)

    def test_bd_rate_of_identical_curves(self):
        self.assertEqual(bd_rate(REFERENCE, REFERENCE), 0.0)

    def test_bd_rate_of_scaled_rate(self):
        test = curve(REFERENCE.bpp * 1.1, REFERENCE.psnr)
        self.assertAlmostEqual(bd_rate(REFERENCE, test), 10.0, places=6)
        self.assertAlmostEqual(bd_rate(test, REFERENCE), (1 / 1.1 - 1) * 100, places=6)

    def test_bd_rate_agrees_with_spline_oracle(self):
        # Four points: the not-a-knot spline through them is the fitted cubic
        rng = np.random.default_rng(5)
        for _ in range(20):
            ref_psnr = 28.0 + np.cumsum(rng.uniform(1.0, 3.0, 4))
            ref_bpp = 0.05 * np.exp(np.cumsum(rng.uniform(0.3, 0.9, 4)))
            test_psnr = ref_psnr + rng.uniform(-0.5, 0.5)
            test_bpp = ref_bpp * rng.uniform(0.8, 1.3) * (1 + 0.02 * np.arange(4))
            reference, test = curve(ref_bpp, ref_psnr), curve(test_bpp, test_psnr)
            lo, hi = max(ref_psnr[0], test_psnr[0]), min(ref_psnr[-1], test_psnr[-1])
            areas = [quad(CubicSpline(c.psnr, np.log10(c.bpp)), lo, hi)[0] for c in (reference, test)]
            expected = (10.0 ** ((areas[1] - areas[0]) / (hi - lo)) - 1.0) * 100.0
            forward, backward = bd_rate(reference, test), bd_rate(test, reference)
            self.assertAlmostEqual(forward, expected, delta=0.1)
            self.assertAlmostEqual((1 + forward / 100) * (1 + backward / 100), 1.0, places=9)

    def test_bd_rate_needs_overlap(self):
        far = curve([0.1, 0.2, 0.4, 0.8], [35.0, 36.0, 37.0, 38.0])
        with self.assertRaises(BDRateError):
            bd_rate(REFERENCE, far)

    def test_msqe_table(self):
        images = synth_dataset(2, 16, seed=3)
        calib_set = calibration_subset(images, 8, 8)
        model = build_model({"N": 4, "M": 4, "seed": 1})
        calibrate(model, calib_set, 0.01, bits=8)
        report = msqe_table(model, calib_set)
        self.assertEqual(list(report.layers), ["g_a.conv0", "g_a.conv1", "g_s.tconv0", "g_s.tconv1"])
        self.assertEqual(report.layers["g_s.tconv0"].activation_msqe, 0.0)
        coarse = model.copy()
        set_bit_widths(coarse, 4)
        coarse_report = msqe_table(coarse, calib_set)
        for layer, entry in report.layers.items():
            self.assertGreaterEqual(entry.weight_msqe, 0.0)
            self.assertLess(entry.weight_msqe, coarse_report.layers[layer].weight_msqe)
        rows = msqe_rows(report)
        self.assertEqual(list(rows[0]), MSQE_COLUMNS)
        with self.assertRaises(ValueError):
            msqe_table(model, [])


if __name__ == '__main__':
    unittest.main()

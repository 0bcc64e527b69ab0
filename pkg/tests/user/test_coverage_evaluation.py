"""
Comprehensive unit tests with coverage for evaluation.py
"""

import unittest
import sys
import os
import csv
import json
import math
import tempfile
import shutil

import numpy as np

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from disparity_core import ConfidenceMap, DepthMap, DisparityMap
from exceptions import EvaluationError
from evaluation import (MetricReport, ai_metric, append_csv_row, common_samples, evaluate, fit_affine_irls,
                        laplace_vs_gaussian_loglik, spearman_measure, uncertainty_from_confidence, uncertainty_loss)


class TestCommonSamples(unittest.TestCase):
    """Test validity intersection."""

    def test_intersection(self):
        """Test that only pixels valid in both grids are used."""
        est = DisparityMap(np.array([[1.0, np.nan], [3.0, 4.0]]))
        gt = np.array([[1.0, 2.0], [np.nan, 4.0]])
        x, y = common_samples(est, gt)
        self.assertEqual(x.tolist(), [1.0, 4.0])
        self.assertEqual(y.tolist(), [1.0, 4.0])

    def test_shape_mismatch(self):
        """Test that mismatched grids raise EvaluationError."""
        with self.assertRaises(EvaluationError):
            common_samples(np.zeros((2, 2)), np.zeros((3, 2)))


class TestAffineInvariant(unittest.TestCase):
    """Test AI(1) and AI(2)."""

    def setUp(self):
        """Set up a noisy relation."""
        rng = np.random.default_rng(3)
        self.gt = rng.random((20, 20))
        self.est = 2.0 * self.gt - 0.5 + 0.05 * rng.standard_normal((20, 20))

    def test_exact_affine_is_zero(self):
        """Test that an exact affine relation scores zero."""
        est = 4.0 * self.gt + 1.0
        for p in (1, 2):
            fit = ai_metric(est, self.gt, p)
            self.assertAlmostEqual(fit.value, 0.0, places=6)
            self.assertAlmostEqual(fit.beta1, 0.25, places=6)
            self.assertAlmostEqual(fit.beta0, -0.25, places=6)
            self.assertFalse(fit.degenerate)

    def test_invariant_to_affine_estimate(self):
        """Test invariance to rescaling and shifting the estimate."""
        for p in (1, 2):
            base = ai_metric(self.est, self.gt, p).value
            moved = ai_metric(-3.0 * self.est + 7.0, self.gt, p).value
            self.assertAlmostEqual(base, moved, places=6)

    def test_l1_hand_example(self):
        """Test AI(1) on a four-point example with one outlier."""
        est = np.array([[0.0, 1.0, 2.0, 3.0]])
        gt = np.array([[0.0, 1.0, 2.0, 10.0]])
        self.assertAlmostEqual(ai_metric(est, gt, 1).value, 1.75, places=6)

    def test_l2_matches_irls(self):
        """Test that the closed form and IRLS agree for p=2."""
        closed = ai_metric(self.est, self.gt, 2, solver='closed-form')
        irls = ai_metric(self.est, self.gt, 2, solver='irls')
        self.assertAlmostEqual(closed.value, irls.value, places=9)

    def test_l2_matches_brute_force_search(self):
        """Test the closed form against a zooming grid search over the coefficients."""
        x, y = self.est.ravel(), self.gt.ravel()
        center, span = np.array([0.0, 0.0]), np.array([4.0, 4.0])
        for _ in range(40):
            b0, b1 = np.meshgrid(np.linspace(center[0] - span[0], center[0] + span[0], 21),
                                 np.linspace(center[1] - span[1], center[1] + span[1], 21), indexing='ij')
            costs = np.sqrt(np.mean((y[None, None, :] - (b0[..., None] + b1[..., None] * x[None, None, :])) ** 2,
                                    axis=-1))
            i, j = np.unravel_index(np.argmin(costs), costs.shape)
            center = np.array([b0[i, j], b1[i, j]])
            span = span / 2.0
        self.assertAlmostEqual(ai_metric(self.est, self.gt, 2).value, float(costs.min()), delta=1e-6)

    def test_l1_not_worse_than_l2_line(self):
        """Test that the L1 fit beats the least-squares line on the L1 objective."""
        fit1 = ai_metric(self.est, self.gt, 1)
        fit2 = ai_metric(self.est, self.gt, 2)
        x, y = self.est.ravel(), self.gt.ravel()
        l2_line_cost = float(np.mean(np.abs(y - (fit2.beta0 + fit2.beta1 * x))))
        self.assertLessEqual(fit1.value, l2_line_cost + 1e-12)

    def test_irls_weights(self):
        """Test IRLS directly on a clean line."""
        x = np.linspace(0.0, 1.0, 50)
        beta0, beta1 = fit_affine_irls(x, 3.0 * x + 2.0, 1.0)
        self.assertAlmostEqual(beta0, 2.0, places=5)
        self.assertAlmostEqual(beta1, 3.0, places=5)

    def test_constant_estimate_degenerate(self):
        """Test that a constant estimate is flagged and fitted by a constant."""
        gt = np.array([[1.0, 2.0, 3.0, 6.0]])
        fit = ai_metric(np.ones((1, 4)), gt, 2)
        self.assertTrue(fit.degenerate)
        self.assertEqual(fit.beta1, 0.0)
        self.assertAlmostEqual(fit.value, float(np.std(gt)))
        self.assertAlmostEqual(ai_metric(np.ones((1, 4)), gt, 1).beta0, 2.5)

    def test_too_few_pixels(self):
        """Test that fewer than two pixels produce NaN and a flag."""
        fit = ai_metric(np.array([[1.0, np.nan]]), np.array([[2.0, 3.0]]), 1)
        self.assertTrue(math.isnan(fit.value))
        self.assertTrue(fit.degenerate)

    def test_invalid_arguments(self):
        """Test unsupported p and solver choices."""
        with self.assertRaises(EvaluationError):
            ai_metric(self.est, self.gt, 3)
        with self.assertRaises(EvaluationError):
            ai_metric(self.est, self.gt, 1, solver='closed-form')
        with self.assertRaises(EvaluationError):
            ai_metric(self.est, self.gt, 2, solver='simplex')


class TestSpearman(unittest.TestCase):
    """Test the rank measure."""

    def test_monotone_is_zero(self):
        """Test that a monotone transform scores zero."""
        gt = np.linspace(0.1, 2.0, 30).reshape(5, 6)
        result = spearman_measure(np.exp(gt), gt)
        self.assertAlmostEqual(result.value, 0.0)
        self.assertAlmostEqual(result.rho, 1.0)

    def test_reversal_is_zero(self):
        """Test that a global reversal also scores zero."""
        gt = np.linspace(0.1, 2.0, 30).reshape(5, 6)
        result = spearman_measure(-gt ** 3, gt)
        self.assertAlmostEqual(result.value, 0.0)
        self.assertFalse(result.degenerate)

    def test_ties_use_average_ranks(self):
        """Test a small example with ties."""
        est = np.array([[1.0, 1.0, 2.0, 3.0]])
        gt = np.array([[1.0, 2.0, 3.0, 4.0]])
        expected = 1.0 - abs(np.corrcoef([1.5, 1.5, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])[0, 1])
        self.assertAlmostEqual(spearman_measure(est, gt).value, expected)

    def test_constant_degenerate(self):
        """Test that constant input is flagged."""
        result = spearman_measure(np.ones((3, 3)), np.arange(9.0).reshape(3, 3))
        self.assertTrue(result.degenerate)
        self.assertTrue(math.isnan(result.value))


class TestUncertaintyLoss(unittest.TestCase):
    """Test the uncertainty-aware loss."""

    def setUp(self):
        """Set up residuals."""
        self.gt = np.zeros((2, 2))
        self.est = np.array([[1.0, -2.0], [0.5, 0.0]])

    def test_unit_sigma_is_mean_abs(self):
        """Test that sigma = 1 reduces to mean absolute error."""
        self.assertAlmostEqual(uncertainty_loss(self.est, self.gt, np.ones((2, 2))), 0.875)

    def test_known_sigma(self):
        """Test a hand-computed value for sigma = e."""
        expected = np.mean(np.sqrt(np.exp(-2.0) * self.est.ravel() ** 2 + 4.0))
        self.assertAlmostEqual(uncertainty_loss(self.est, self.gt, np.full((2, 2), math.e)), expected)

    def test_radicand_clamped(self):
        """Test that small sigma with zero residual clamps at zero."""
        self.assertEqual(uncertainty_loss(np.zeros((1, 1)), np.zeros((1, 1)), np.full((1, 1), 0.1)), 0.0)

    def test_confidence_input(self):
        """Test that zero confidence means unit uncertainty."""
        conf = ConfidenceMap(np.zeros((2, 2)))
        self.assertAlmostEqual(uncertainty_loss(self.est, self.gt, conf), 0.875)
        np.testing.assert_allclose(uncertainty_from_confidence(ConfidenceMap(np.ones((1, 1)))), 1e-3)

    def test_errors(self):
        """Test rejected inputs."""
        with self.assertRaises(EvaluationError):
            uncertainty_loss(self.est, self.gt, np.zeros((2, 2)))
        with self.assertRaises(EvaluationError):
            uncertainty_loss(self.est, self.gt, np.ones((3, 3)))
        with self.assertRaises(EvaluationError):
            uncertainty_loss(np.full((2, 2), np.nan), self.gt, np.ones((2, 2)))
        with self.assertRaises(EvaluationError):
            uncertainty_from_confidence(ConfidenceMap(np.ones((1, 1))), floor=0.0)


class TestLogLikelihood(unittest.TestCase):
    """Test the Laplace versus Gaussian comparison."""

    def test_laplace_samples_prefer_laplace(self):
        """Test heavy-tailed samples."""
        errors = np.random.default_rng(0).laplace(0.0, 1.0, 5000)
        laplace, gaussian = laplace_vs_gaussian_loglik(errors)
        self.assertGreater(laplace, gaussian)

    def test_gaussian_samples_prefer_gaussian(self):
        """Test light-tailed samples."""
        errors = np.random.default_rng(0).standard_normal(5000)
        laplace, gaussian = laplace_vs_gaussian_loglik(errors)
        self.assertGreater(gaussian, laplace)

    def test_constant_errors(self):
        """Test that constant errors give NaN."""
        laplace, gaussian = laplace_vs_gaussian_loglik([1.0, 1.0, np.nan])
        self.assertTrue(math.isnan(laplace) and math.isnan(gaussian))


class TestEvaluate(unittest.TestCase):
    """Test the combined report."""

    def setUp(self):
        """Set up depth ground truth and a matching estimate."""
        self.temp_dir = tempfile.mkdtemp()
        self.depth = np.linspace(0.5, 4.0, 64).reshape(8, 8)
        self.est = DisparityMap(3.0 / self.depth + 1.0)

    def tearDown(self):
        """Remove the temporary directory."""
        shutil.rmtree(self.temp_dir)

    def test_depth_converted_to_inverse_depth(self):
        """Test that depth ground truth is inverted before alignment."""
        report = evaluate(self.est, DepthMap(self.depth))
        self.assertAlmostEqual(report.ai1, 0.0, places=6)
        self.assertAlmostEqual(report.ai2, 0.0, places=9)
        self.assertAlmostEqual(report.spearman_one_minus_abs, 0.0)
        self.assertAlmostEqual(report.beta1, 1.0 / 3.0)
        self.assertEqual(report.n_pixels, 64)
        self.assertFalse(report.degenerate)

    def test_disparity_ground_truth(self):
        """Test ground truth given as disparity."""
        report = evaluate(self.est, DisparityMap(self.est.values * 2.0), gt_kind='disparity')
        self.assertAlmostEqual(report.ai2, 0.0, places=9)
        self.assertEqual(report.gt_kind, 'disparity')

    def test_crop(self):
        """Test the crop rectangle."""
        report = evaluate(self.est, DepthMap(self.depth), crop=(2, 1, 6, 4))
        self.assertEqual(report.n_pixels, 12)
        with self.assertRaises(EvaluationError):
            evaluate(self.est, DepthMap(self.depth), crop=(0, 0, 9, 4))

    def test_unknown_kind(self):
        """Test that unknown ground-truth kinds are rejected."""
        with self.assertRaises(EvaluationError):
            evaluate(self.est, DepthMap(self.depth), gt_kind='metric-depth')

    def test_report_serializable(self):
        """Test that the report dictionary is plain JSON."""
        report = evaluate(DisparityMap(np.ones((4, 4))), DepthMap(np.full((4, 4), 2.0)))
        self.assertTrue(report.degenerate)
        text = json.dumps(report.to_dict())
        self.assertIn('"degenerate": true', text)

    def test_append_csv(self):
        """Test that the header is written once."""
        path = os.path.join(self.temp_dir, 'metrics.csv')
        report = MetricReport(0.1, 0.2, 0.01, 0.0, 1.0, 100)
        append_csv_row(report, path, 'dense')
        append_csv_row(report, path, 'refined')
        with open(path, 'r', encoding='utf-8', newline='') as f:
            rows = list(csv.DictReader(f))
        self.assertEqual([row['label'] for row in rows], ['dense', 'refined'])
        self.assertEqual(rows[0]['ai1'], '0.1')
        self.assertEqual(rows[1]['n_pixels'], '100')


if __name__ == '__main__':
    unittest.main()

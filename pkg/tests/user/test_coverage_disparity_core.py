"""
Comprehensive unit tests with coverage for disparity_core.py
"""

import unittest
import sys
import os
import threading

import numpy as np

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from disparity_core import (CameraParams, ConfidenceMap, DepthMap, DisparityMap, DPImagePair,
                            depth_to_disparity, disparity_limit, disparity_to_depth, ordered_map, to_gray)
from exceptions import ConfigurationError, ValidationError


def scalar_disparity(z, focal_length, f_number, focus_distance, alpha):
    """Independent scalar form of the thin-lens disparity."""
    aperture = focal_length / f_number
    return alpha * aperture * focal_length / (1.0 - focal_length / focus_distance) * (1.0 / focus_distance - 1.0 / z)


class TestCameraParams(unittest.TestCase):
    """Test camera parameter validation and serialization."""

    def test_aperture_derived_from_f_number(self):
        """Test that the aperture defaults to f / F."""
        cam = CameraParams(0.05, 2.0, 2.0)
        self.assertAlmostEqual(cam.aperture, 0.025)
        self.assertAlmostEqual(cam.sensor_distance, 0.05 / 0.975)

    def test_focus_must_exceed_focal_length(self):
        """Test that z_f <= f is rejected."""
        with self.assertRaises(ConfigurationError):
            CameraParams(0.05, 2.0, 0.05)
        with self.assertRaises(ConfigurationError):
            CameraParams(0.05, 2.0, 0.01)

    def test_nonpositive_parameters_rejected(self):
        """Test that zero or negative parameters are rejected."""
        with self.assertRaises(ConfigurationError):
            CameraParams(0.0, 2.0, 2.0)
        with self.assertRaises(ConfigurationError):
            CameraParams(0.05, -2.0, 2.0)
        with self.assertRaises(ConfigurationError):
            CameraParams(0.05, 2.0, 2.0, alpha=0.0)

    def test_inconsistent_aperture_rejected(self):
        """Test that an aperture disagreeing with f / F is rejected."""
        with self.assertRaises(ConfigurationError):
            CameraParams(0.05, 2.0, 2.0, 1.0, aperture=0.01)

    def test_dict_round_trip(self):
        """Test the camera JSON layout."""
        cam = CameraParams(0.035, 2.8, 1.5, 1234.5)
        data = cam.to_dict()
        self.assertEqual(set(data), {'focal_length_m', 'f_number', 'focus_distance_m', 'alpha'})
        self.assertEqual(CameraParams.from_dict(data), cam)

    def test_from_dict_missing_keys(self):
        """Test that missing camera keys raise ConfigurationError."""
        with self.assertRaises(ConfigurationError) as ctx:
            CameraParams.from_dict({'focal_length_m': 0.05})
        self.assertIn('f_number', str(ctx.exception))

    def test_from_dict_bad_value(self):
        """Test that non-numeric values raise ConfigurationError."""
        with self.assertRaises(ConfigurationError):
            CameraParams.from_dict({'focal_length_m': 'wide', 'f_number': 2, 'focus_distance_m': 2})

    def test_with_alpha(self):
        """Test that with_alpha keeps the optics and scales the gain."""
        cam = CameraParams(0.05, 2.0, 2.0)
        scaled = cam.with_alpha(10.0)
        self.assertEqual(scaled.focal_length, cam.focal_length)
        self.assertAlmostEqual(scaled.disparity_gain, 10.0 * cam.disparity_gain)


class TestConversions(unittest.TestCase):
    """Test depth/disparity conversion."""

    def setUp(self):
        """Set up test camera."""
        self.cam = CameraParams(0.05, 2.0, 2.0, 5000.0)

    def test_matches_scalar_oracle(self):
        """Test agreement with the scalar formula."""
        z = np.array([[0.5, 1.0, 2.0, 4.0, 100.0]])
        d = depth_to_disparity(DepthMap(z), self.cam)
        for value, depth in zip(d.values[0], z[0]):
            self.assertAlmostEqual(value, scalar_disparity(depth, 0.05, 2.0, 2.0, 5000.0), places=9)

    def test_zero_at_focus(self):
        """Test that disparity is exactly zero at the focus distance."""
        d = depth_to_disparity(DepthMap(np.full((2, 2), 2.0)), self.cam)
        self.assertTrue(np.all(d.values == 0.0))

    def test_far_side_positive_and_monotone(self):
        """Test the sign convention and monotonicity in depth."""
        z = np.linspace(0.3, 50.0, 200)[None, :]
        d = depth_to_disparity(DepthMap(z), self.cam).values[0]
        self.assertTrue(np.all(np.diff(d) > 0))
        self.assertTrue(np.all(d[z[0] > 2.0] > 0))
        self.assertTrue(np.all(d[z[0] < 2.0] < 0))

    def test_infinity_limit(self):
        """Test that disparity approaches the limit as depth grows."""
        d = depth_to_disparity(DepthMap(np.array([[1e12]])), self.cam)
        self.assertAlmostEqual(d.values[0, 0], disparity_limit(self.cam), places=6)
        self.assertGreater(disparity_limit(self.cam), 0)

    def test_round_trip(self):
        """Test depth -> disparity -> depth over random cameras."""
        rng = np.random.default_rng(3)
        for _ in range(50):
            focal = rng.uniform(0.02, 0.1)
            cam = CameraParams(focal, rng.choice([1.4, 2.0, 4.0]), rng.uniform(0.3, 10.0) + focal,
                               rng.uniform(1.0, 1e5))
            z = rng.uniform(0.2, 100.0, size=(4, 5))
            back = disparity_to_depth(depth_to_disparity(DepthMap(z), cam), cam)
            self.assertTrue(back.valid.all())
            np.testing.assert_allclose(back.values, z, rtol=1e-9)

    def test_beyond_limit_is_invalid(self):
        """Test that disparities past the infinity limit map to invalid depth."""
        d = DisparityMap(np.array([[disparity_limit(self.cam) * 1.5, 0.0]]))
        depth = disparity_to_depth(d, self.cam)
        self.assertFalse(depth.valid[0, 0])
        self.assertTrue(depth.valid[0, 1])
        self.assertAlmostEqual(depth.values[0, 1], 2.0)

    def test_invalid_depth_propagates(self):
        """Test that invalid depth stays invalid."""
        d = depth_to_disparity(DepthMap(np.array([[np.nan, 1.0]])), self.cam)
        self.assertEqual(d.valid.tolist(), [[False, True]])


class TestMaps(unittest.TestCase):
    """Test the map containers."""

    def test_invalid_samples_hold_nan(self):
        """Test that masked samples are NaN."""
        d = DisparityMap(np.ones((2, 2)), np.array([[True, False], [True, True]]))
        self.assertTrue(np.isnan(d.values[0, 1]))
        self.assertEqual(d.count_valid(), 3)
        self.assertEqual(d.filled(-1.0)[0, 1], -1.0)

    def test_nonfinite_values_invalid(self):
        """Test that non-finite values are never valid."""
        d = DisparityMap(np.array([[np.inf, 1.0]]), np.array([[True, True]]))
        self.assertFalse(d.valid[0, 0])

    def test_depth_nonpositive_invalid(self):
        """Test that zero and negative depths are invalid."""
        z = DepthMap(np.array([[0.0, -1.0, 2.0]]))
        self.assertEqual(z.valid.tolist(), [[False, False, True]])

    def test_shape_checks(self):
        """Test dimension validation."""
        with self.assertRaises(ValidationError):
            DisparityMap(np.ones(3))
        with self.assertRaises(ValidationError):
            DisparityMap(np.ones((2, 2)), np.ones((3, 3), dtype=bool))
        self.assertEqual(DisparityMap(np.ones((2, 3))).shape, (2, 3))

    def test_confidence_clamped(self):
        """Test confidence clamping and binarization."""
        conf = ConfidenceMap(np.array([[-0.5, 0.4, 0.5, 2.0, np.nan]]))
        self.assertEqual(conf.values.tolist(), [[0.0, 0.4, 0.5, 1.0, 0.0]])
        self.assertFalse(conf.is_binary())
        binary = conf.binarize(0.5)
        self.assertTrue(binary.is_binary())
        self.assertEqual(binary.values.tolist(), [[0.0, 0.0, 1.0, 1.0, 0.0]])
        self.assertEqual(conf.as_mask(0.4).tolist(), [[False, True, True, True, False]])


class TestDPImagePair(unittest.TestCase):
    """Test the image pair container."""

    def test_shape_mismatch(self):
        """Test that mismatched views are rejected."""
        with self.assertRaises(ValidationError):
            DPImagePair(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_reference_prefers_guide(self):
        """Test that the guide is used as reference when present."""
        guide = np.ones((4, 4, 3))
        pair = DPImagePair(np.zeros((4, 4)), np.zeros((4, 4)), guide)
        self.assertEqual(pair.reference.shape, (4, 4, 3))
        self.assertEqual(DPImagePair(np.zeros((4, 4)), np.zeros((4, 4))).reference.shape, (4, 4))

    def test_nonfinite_views_rejected(self):
        """Test that NaN views are rejected."""
        left = np.zeros((3, 3))
        left[1, 1] = np.nan
        with self.assertRaises(ValidationError):
            DPImagePair(left, np.zeros((3, 3)))

    def test_to_gray(self):
        """Test channel averaging."""
        rgb = np.stack([np.zeros((2, 2)), np.ones((2, 2)), np.full((2, 2), 0.5)], axis=2)
        np.testing.assert_allclose(to_gray(rgb), 0.5)


class TestOrderedMap(unittest.TestCase):
    """Test the worker map."""

    def test_order_preserved_with_threads(self):
        """Test that results keep input order for any thread count."""
        items = list(range(40))
        self.assertEqual(ordered_map(lambda x: x * x, items, threads=1), [x * x for x in items])
        self.assertEqual(ordered_map(lambda x: x * x, items, threads=4), [x * x for x in items])

    def test_uses_workers(self):
        """Test that more than one thread is used when allowed."""
        seen = set()
        barrier = threading.Barrier(2, timeout=5)

        def task(x):
            seen.add(threading.get_ident())
            barrier.wait()
            return x

        self.assertEqual(ordered_map(task, [1, 2], threads=2), [1, 2])
        self.assertEqual(len(seen), 2)


if __name__ == '__main__':
    unittest.main()

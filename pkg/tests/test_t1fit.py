import os
import sys
import unittest

import numpy as np

# Adjust path to import from src
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(project_root, 'src'))

from qmr_motion.config import MOLLI_INVERSION_TIMES_MS, T1FitConfig
from qmr_motion.errors import ConfigError, ValidationError
from qmr_motion.stack import ImageStack, RoiMask
from qmr_motion.t1fit import SENTINEL, fit_curves, fit_map, fit_pixel, look_locker_t1, roi_stats, signal_model

TIMES = np.asarray(MOLLI_INVERSION_TIMES_MS)


def _magnitude_curve(a=0.7, b=1.33, t1_star=1200.0):
    return np.abs(signal_model(TIMES, a, b, t1_star))


class TestModel(unittest.TestCase):

    def test_signal_model_shapes(self):
        """Parameters broadcast against the inversion times on the last axis."""
        self.assertEqual(signal_model(TIMES, 1.0, 2.0, 1000.0).shape, (11,))
        values = signal_model(TIMES, np.ones((2, 3)), np.full((2, 3), 2.0), np.full((2, 3), 1000.0))
        self.assertEqual(values.shape, (2, 3, 11))
        self.assertAlmostEqual(float(signal_model([1000.0], 1.0, 2.0, 1000.0)[0]), 1.0 - 2.0 / np.e)

    def test_look_locker_correction(self):
        self.assertAlmostEqual(look_locker_t1(0.7, 1.33, 1200.0), 1200.0 * (1.33 / 0.7 - 1.0))


class TestFitPixel(unittest.TestCase):

    def test_recovers_noiseless_magnitude_curve(self):
        """Polarity restoration turns a magnitude curve back into the signed recovery and fits it exactly."""
        fit = fit_pixel(TIMES, _magnitude_curve())
        self.assertTrue(fit.converged)
        self.assertAlmostEqual(fit.t1_star, 1200.0, delta=1e-3)
        self.assertAlmostEqual(fit.a, 0.7, delta=1e-6)
        self.assertAlmostEqual(fit.b, 1.33, delta=1e-6)
        self.assertLess(fit.residual, 1e-8)
        self.assertEqual(fit.t1, fit.t1_star)

    def test_look_locker_option(self):
        config = T1FitConfig(look_locker=True)
        fit = fit_pixel(TIMES, _magnitude_curve(), True, config)
        self.assertAlmostEqual(fit.t1, 1200.0 * (1.33 / 0.7 - 1.0), delta=1e-2)

    def test_flip_is_reported(self):
        """Three early samples are negative for T1* = 1200 ms, so the chosen flip count is 3."""
        signed = signal_model(TIMES, 0.7, 1.33, 1200.0)
        self.assertEqual(int(np.sum(signed < 0)), 3)
        result = fit_curves(TIMES, _magnitude_curve()[None])
        self.assertEqual(int(result["flips"][0]), 3)

    def test_without_polarity_restore_the_fit_is_worse(self):
        restored = fit_pixel(TIMES, _magnitude_curve(), True)
        plain = fit_pixel(TIMES, _magnitude_curve(), False)
        self.assertGreater(plain.residual, restored.residual)

    def test_noisy_curve_has_positive_sd(self):
        rng = np.random.default_rng(0)
        noisy = _magnitude_curve() + rng.normal(0.0, 0.01, size=TIMES.size)
        fit = fit_pixel(TIMES, noisy)
        self.assertTrue(fit.converged)
        self.assertGreater(fit.sd, 0.0)
        self.assertLess(fit.sd, 200.0)
        self.assertAlmostEqual(fit.t1_star, 1200.0, delta=150.0)

    def test_flat_curve_is_not_converged(self):
        """A constant curve carries no recovery, so B and T1* are not identifiable."""
        fit = fit_pixel(TIMES, np.full(TIMES.size, 0.5), False)
        self.assertFalse(fit.converged)

    def test_recovers_random_parameters_from_noiseless_curves(self):
        rng = np.random.default_rng(11)
        times = np.array([100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0, 6400.0])
        a = rng.uniform(0.5, 1.5, size=100)
        b = a * rng.uniform(1.5, 2.5, size=100)
        t1_star = rng.uniform(200.0, 2500.0, size=100)
        config = T1FitConfig(polarity_restore=False, max_iterations=500)
        fit = fit_curves(times, signal_model(times, a, b, t1_star), config)
        self.assertTrue(fit["converged"].all())
        np.testing.assert_allclose(fit["a"], a, rtol=1e-6)
        np.testing.assert_allclose(fit["b"], b, rtol=1e-6)
        np.testing.assert_allclose(fit["t1_star"], t1_star, rtol=1e-6)

    def test_reported_sd_matches_monte_carlo_spread(self):
        """At SNR 100 the mean reported SD is within 20% of the empirical std of the fitted T1*."""
        rng = np.random.default_rng(12)
        clean = signal_model(TIMES, 1.0, 2.0, 1000.0)
        noisy = clean[None, :] + rng.normal(0.0, 0.01, size=(10000, TIMES.size))
        fit = fit_curves(TIMES, noisy, T1FitConfig(polarity_restore=False))
        converged = fit["converged"]
        self.assertGreater(converged.mean(), 0.99)
        empirical = float(np.std(fit["t1_star"][converged]))
        reported = float(np.mean(fit["sd"][converged]))
        self.assertLess(abs(reported - empirical), 0.2 * empirical)

    def test_magnitude_fit_matches_signed_fit(self):
        """Fitting |y| picks the flip count of the signed curve and lands on the same parameters."""
        t1_values = np.array([400.0, 600.0, 800.0, 1200.0, 1600.0, 2000.0])
        signed = signal_model(TIMES, 0.7, 1.33, t1_values)
        from_signed = fit_curves(TIMES, signed, T1FitConfig(polarity_restore=False))
        from_magnitude = fit_curves(TIMES, np.abs(signed), T1FitConfig(polarity_restore=True))
        np.testing.assert_array_equal(from_magnitude["flips"], np.sum(signed < 0, axis=1))
        self.assertTrue(from_magnitude["converged"].all())
        for key in ("a", "b", "t1_star"):
            np.testing.assert_allclose(from_magnitude[key], from_signed[key], rtol=1e-6)
        np.testing.assert_allclose(from_magnitude["t1_star"], t1_values, rtol=1e-6)

    def test_invalid_times(self):
        with self.assertRaises(ValidationError):
            fit_pixel([100.0, 200.0, 300.0], [0.1, 0.2, 0.3])
        with self.assertRaises(ValidationError):
            fit_pixel([100.0, 100.0, 300.0, 400.0], [0.1, 0.2, 0.3, 0.4])
        with self.assertRaises(ValidationError):
            fit_curves(TIMES, np.ones((2, 5)))


class TestFitMap(unittest.TestCase):

    def setUp(self):
        t1_map = np.full((8, 8), 800.0)
        t1_map[2:6, 2:6] = 1400.0
        signal = np.abs(np.moveaxis(signal_model(TIMES, 0.6, 1.14, t1_map), -1, 0))
        self.stack = ImageStack(signal, TIMES)
        self.t1_map = t1_map
        inner = np.zeros((8, 8), dtype=bool)
        inner[2:6, 2:6] = True
        self.mask = RoiMask(inner, "inner")

    def test_masked_map(self):
        """Pixels inside the mask get their tissue T1*, pixels outside keep the sentinel."""
        maps = fit_map(self.stack, self.mask)
        self.assertTrue(maps.converged[self.mask.mask].all())
        self.assertFalse(maps.converged[~self.mask.mask].any())
        np.testing.assert_allclose(maps.t1_star_map[self.mask.mask], 1400.0, rtol=1e-5)
        self.assertTrue(np.all(maps.t1_star_map[~self.mask.mask] == SENTINEL))
        self.assertEqual(maps.as_frames().shape, (5, 8, 8))
        self.assertEqual(list(maps.named_maps()), ["A", "B", "T1star", "T1", "SD"])

    def test_chunking_does_not_change_results(self):
        whole = fit_map(self.stack)
        chunked = fit_map(self.stack, config=T1FitConfig(chunk_size=7))
        np.testing.assert_allclose(chunked.t1_star_map, whole.t1_star_map, rtol=1e-12)
        np.testing.assert_array_equal(chunked.converged, whole.converged)
        np.testing.assert_allclose(whole.t1_star_map, self.t1_map, rtol=1e-5)

    def test_stack_without_times(self):
        with self.assertRaises(ConfigError):
            fit_map(ImageStack(self.stack.frames))

    def test_mask_shape_mismatch(self):
        with self.assertRaises(ValidationError):
            fit_map(self.stack, RoiMask(np.ones((9, 8)), "wrong"))


class TestRoiStats(unittest.TestCase):

    def test_mean_std_count(self):
        values = np.arange(16, dtype=np.float64).reshape(4, 4)
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, :2] = True
        mask[1, 0] = True
        roi = RoiMask(mask, "roi")
        mean, std, count = roi_stats(values, roi)
        self.assertAlmostEqual(mean, (0 + 1 + 4) / 3.0)
        self.assertAlmostEqual(std, float(np.std([0.0, 1.0, 4.0])))
        self.assertEqual(count, 3)

        converged = np.zeros((4, 4), dtype=bool)
        converged[0, 1] = True
        self.assertEqual(roi_stats(values, roi, converged), (1.0, 0.0, 1))
        with self.assertRaises(ValidationError):
            roi_stats(values, roi, np.zeros((4, 4), dtype=bool))


if __name__ == '__main__':
    unittest.main()

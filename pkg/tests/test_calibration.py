import unittest

import numpy as np
from scipy.special import expit

from src.calibration import (
    apply_temperature,
    confidence_error_summary,
    confidence_map,
    expected_calibration_error,
    fit_temperature,
    lbfgs_minimize,
    mve_mc_dice_loss,
    mve_mc_dice_loss_grad,
    mve_predictive_probs,
    nll,
    nll_and_grad,
    reliability,
)
from src.errors import DataError
from src.losses import dice_loss


def _overconfident(n=200_000, scale=2.0, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, 2.0, size=n)
    y = (rng.random(n) < expit(z)).astype(np.float64)
    return scale * z, y


def _assert_wolfe(test, res, c1=1e-4, c2=0.9):
    for step in res.history:
        test.assertLessEqual(step.f_end, step.f_start + c1 * step.alpha * step.slope_start + 1e-12)
        test.assertLessEqual(abs(step.slope_end), c2 * abs(step.slope_start) + 1e-12)


class TestLBFGS(unittest.TestCase):
    def test_isotropic_quadratic_terminates_quickly(self):
        b = np.array([1.0, -2.0, 3.0, 0.5])

        def fg(x):
            return 0.5 * 3.0 * float(x @ x) - float(b @ x), 3.0 * x - b

        res = lbfgs_minimize(fg, np.zeros(4))
        self.assertTrue(res.converged)
        self.assertLessEqual(res.iterations, 2)
        self.assertTrue(np.allclose(res.x, b / 3.0, atol=1e-8))
        _assert_wolfe(self, res)

    def test_rosenbrock(self):
        def fg(x):
            a, c = x
            f = (1 - a) ** 2 + 100 * (c - a * a) ** 2
            g = np.array([-2 * (1 - a) - 400 * a * (c - a * a), 200 * (c - a * a)])
            return f, g

        res = lbfgs_minimize(fg, [-1.2, 1.0], max_iter=500)
        self.assertTrue(np.allclose(res.x, [1.0, 1.0], atol=1e-5), res.x)
        self.assertTrue(res.history)
        _assert_wolfe(self, res)
        values = [s.f_end for s in res.history]
        self.assertTrue(all(b <= a for a, b in zip(values, values[1:])))

    def test_already_optimal(self):
        res = lbfgs_minimize(lambda x: (float(x @ x), 2 * x), [0.0, 0.0])
        self.assertEqual(res.iterations, 0)
        self.assertTrue(res.converged)


class TestTemperature(unittest.TestCase):
    def test_nll_gradient_matches_finite_differences(self):
        z, y = _overconfident(n=500, seed=1)
        for t in (0.5, 1.0, 3.0):
            _, g = nll_and_grad(z, y, t)
            h = 1e-6
            num = (nll(z, y, t + h) - nll(z, y, t - h)) / (2 * h)
            self.assertAlmostEqual(g, num, places=6)

    def test_recovers_known_overconfidence(self):
        z, y = _overconfident()
        model = fit_temperature(z, y)
        self.assertTrue(1.9 <= model.temperature <= 2.1, model.temperature)
        self.assertTrue(model.converged)
        self.assertLess(model.nll_after, model.nll_before)
        before = expected_calibration_error(apply_temperature(z, 1.0), y)
        after = expected_calibration_error(apply_temperature(z, model.temperature), y)
        self.assertLess(after, before)

    def test_scaling_never_changes_the_mask(self):
        z, _ = _overconfident(n=10_000)
        for t in (0.3, 1.0, 2.5, 900.0):
            self.assertTrue(np.array_equal(apply_temperature(z, t) >= 0.5, z >= 0))

    def test_uninformative_logits_hit_the_cap(self):
        a = np.random.default_rng(2).normal(0.0, 3.0, size=500)
        z = np.concatenate([a, -a, a, -a])
        y = np.concatenate([np.ones(1000), np.zeros(1000)])
        with self.assertLogs("src.calibration", level="WARNING"):
            model = fit_temperature(z, y, cap=1000.0)
        self.assertEqual(model.temperature, 1000.0)
        self.assertFalse(model.converged)

    def test_single_class_and_bad_temperature(self):
        with self.assertRaises(DataError):
            fit_temperature(np.zeros(10), np.ones(10))
        with self.assertRaises(DataError):
            apply_temperature(np.zeros(3), 0.0)


class TestReliability(unittest.TestCase):
    def test_calibrated_probabilities_have_small_ece(self):
        rng = np.random.default_rng(3)
        p = rng.random(200_000)
        y = (rng.random(p.size) < p).astype(float)
        diagram = reliability(p, y, bins=10)
        self.assertLess(diagram.ece, 0.01)
        self.assertEqual(int(diagram.counts.sum()), p.size)
        frame = diagram.to_frame()
        self.assertEqual(list(frame.columns), ["bin_lo", "bin_hi", "mean_pred", "observed", "count"])
        self.assertEqual(len(frame), 10)

    def test_edges_and_empty_bins(self):
        diagram = reliability(np.array([0.0, 1.0, 1.0]), np.array([0, 1, 1]), bins=4)
        self.assertEqual(diagram.counts.tolist(), [1, 0, 0, 2])
        self.assertTrue(np.isnan(diagram.mean_pred[1]))
        self.assertEqual(diagram.ece, 0.0)

    def test_validation(self):
        with self.assertRaises(DataError):
            reliability(np.array([0.5]), np.array([1.0]), bins=1)
        with self.assertRaises(DataError):
            reliability(np.array([1.5]), np.array([1.0]))


class TestConfidence(unittest.TestCase):
    def test_levels(self):
        cmap = confidence_map(np.array([0.5, 0.8, 0.95, 0.05, 0.25]))
        self.assertEqual(cmap.level.tolist(), [0, 1, 2, 2, 1])
        self.assertTrue(np.allclose(cmap.confidence, [0.5, 0.8, 0.95, 0.95, 0.75]))
        self.assertAlmostEqual(sum(cmap.level_fractions().values()), 1.0)
        with self.assertRaises(DataError):
            confidence_map(np.array([0.5]), levels=(0.9, 0.7))

    def test_errors_sit_at_lower_confidence(self):
        p = np.array([0.99, 0.02, 0.6, 0.45])
        y = np.array([1, 0, 0, 1])
        s = confidence_error_summary(p, y)
        self.assertEqual((s["n_correct"], s["n_wrong"]), (2, 2))
        self.assertGreater(s["mean_confidence_correct"], s["mean_confidence_wrong"])
        self.assertEqual(s["low_confidence_share_wrong"], 1.0)


class TestMVE(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(4)
        self.mu = rng.normal(size=(2, 1, 6, 6))
        self.logvar = rng.normal(-1.0, 0.5, size=self.mu.shape)
        self.y = (rng.random(self.mu.shape) > 0.5).astype(float)

    def test_zero_variance_reduces_to_dice_loss(self):
        lv = np.full(self.mu.shape, -np.inf)
        loss = mve_mc_dice_loss(self.mu, lv, self.y, samples=5)
        self.assertAlmostEqual(loss, dice_loss(expit(self.mu), self.y), delta=1e-6)
        self.assertTrue(np.allclose(mve_predictive_probs(self.mu, lv, samples=3), expit(self.mu)))

    def test_gradients_with_common_random_numbers(self):
        _, dmu, dlv = mve_mc_dice_loss_grad(self.mu, self.logvar, self.y, 8, np.random.default_rng(9))
        h = 1e-6
        for arr, grad in ((self.mu, dmu), (self.logvar, dlv)):
            for idx in [(0, 0, 1, 2), (1, 0, 5, 5)]:
                old = arr[idx]
                arr[idx] = old + h
                up = mve_mc_dice_loss(self.mu, self.logvar, self.y, 8, np.random.default_rng(9))
                arr[idx] = old - h
                down = mve_mc_dice_loss(self.mu, self.logvar, self.y, 8, np.random.default_rng(9))
                arr[idx] = old
                self.assertAlmostEqual(grad[idx], (up - down) / (2 * h), places=7)

    def test_more_samples_reduce_estimator_spread(self):
        lv = np.full(self.mu.shape, 1.0)
        spread = {}
        for samples in (4, 16):
            draws = [mve_mc_dice_loss(self.mu, lv, self.y, samples, np.random.default_rng(s)) for s in range(300)]
            spread[samples] = float(np.std(draws))
        ratio = spread[4] / spread[16]
        self.assertTrue(1.6 <= ratio <= 2.5, ratio)

    def test_shape_mismatch(self):
        with self.assertRaises(DataError):
            mve_mc_dice_loss(self.mu, self.logvar[:1], self.y)


if __name__ == "__main__":
    unittest.main()

import itertools
import unittest

import numpy as np

from src.errors import DataError
from src.evaluation import (
    compare_methods,
    confusion,
    dice,
    morphometrics,
    signed_rank_null_counts,
    summarize,
    wilcoxon_signed_rank,
)
from src.losses import dice_loss
from scipy import stats


def _enumerated_p(a, b):
    d = np.asarray(a) - np.asarray(b)
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    w = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(ranks)):
        if sum(r for r, s in zip(ranks, signs) if s) <= w + 1e-9:
            hits += 1
    return min(1.0, 2.0 * hits / 2 ** len(ranks))


class TestDice(unittest.TestCase):
    def test_counts_and_value(self):
        pred = np.array([[1, 1, 0], [0, 0, 0]], dtype=bool)
        target = np.array([[1, 0, 0], [1, 0, 0]], dtype=bool)
        c = confusion(pred, target)
        self.assertEqual((c.tp, c.fp, c.fn, c.tn), (1, 1, 1, 3))
        self.assertAlmostEqual(dice(pred, target), 0.5)

    def test_empty_masks_agree(self):
        z = np.zeros((4, 4), dtype=bool)
        self.assertEqual(dice(z, z), 1.0)
        self.assertEqual(dice(z, ~z), 0.0)

    def test_hard_dice_matches_unsmoothed_loss(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            shape = tuple(rng.integers(1, 6, size=2))
            p = rng.random(shape) < rng.random()
            y = rng.random(shape) < rng.random()
            self.assertAlmostEqual(1.0 - dice(p, y), dice_loss(p.astype(float), y, eps=0.0), places=12)

    def test_shape_mismatch(self):
        with self.assertRaises(DataError):
            dice(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSummaries(unittest.TestCase):
    def test_interpolated_quartiles(self):
        s = summarize([0.4, 0.1, 0.3, 0.2])
        self.assertAlmostEqual(s.median, 0.25)
        self.assertAlmostEqual(s.q1, 0.175)
        self.assertAlmostEqual(s.q3, 0.325)
        self.assertEqual(s.to_dict()["n"], 4)

    def test_rejects_bad_input(self):
        with self.assertRaises(DataError):
            summarize([])
        with self.assertRaises(DataError):
            summarize([0.5, 1.5])


class TestWilcoxon(unittest.TestCase):
    def test_exact_matches_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            n = int(rng.integers(2, 13))
            a = np.round(rng.random(n), 1)
            b = np.round(rng.random(n), 1)
            if np.all(a == b):
                continue
            res = wilcoxon_signed_rank(a, b, method="exact")
            self.assertAlmostEqual(res.p_value, _enumerated_p(a, b), places=12)
            self.assertEqual(res.zeros_dropped, int(np.sum(a == b)))

    def test_six_one_sided_pairs(self):
        res = wilcoxon_signed_rank([0.9] * 6, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
        self.assertEqual(res.method, "exact")
        self.assertEqual(res.statistic, 0.0)
        self.assertEqual(res.w_plus, 21.0)
        self.assertAlmostEqual(res.p_value, 0.03125, places=12)
        self.assertFalse(res.reject)

    def test_null_counts_sum_to_all_sign_patterns(self):
        counts = signed_rank_null_counts([2, 4, 6, 8])
        self.assertEqual(int(counts.sum()), 16)
        self.assertEqual(counts.tolist(), counts[::-1].tolist())

    def test_normal_approximation_tracks_exact(self):
        rng = np.random.default_rng(2)
        a = rng.random(25)
        b = a - rng.normal(0.05, 0.1, size=25)
        exact = wilcoxon_signed_rank(a, b, method="exact").p_value
        approx = wilcoxon_signed_rank(a, b, method="normal").p_value
        self.assertLess(abs(exact - approx), 0.01)
        self.assertEqual(wilcoxon_signed_rank(np.r_[a, 0.5], np.r_[b, 0.1]).method, "normal")

    def test_large_clear_difference_rejects(self):
        rng = np.random.default_rng(3)
        b = rng.random(192) * 0.5
        res = wilcoxon_signed_rank(b + 0.3 + rng.random(192) * 0.01, b, alpha=0.001)
        self.assertTrue(res.reject)
        self.assertLess(res.p_value, 1e-20)

    def test_degenerate_inputs(self):
        with self.assertRaises(DataError):
            wilcoxon_signed_rank([0.5, 0.5], [0.5, 0.5])
        with self.assertRaises(DataError):
            wilcoxon_signed_rank([0.5], [0.4])
        with self.assertRaises(DataError):
            wilcoxon_signed_rank([0.5, 0.4], [0.4])

    def test_comparison_reports_degenerate_test(self):
        report = compare_methods([0.7, 0.8, 0.9], [0.7, 0.8, 0.9], labels=("unet", "baseline"))
        self.assertIsNone(report.wilcoxon)
        self.assertIn("zero", report.error)
        self.assertEqual(list(report.table.columns), ["tile", "unet", "baseline", "difference"])
        self.assertIsNone(report.to_dict()["wilcoxon"])


class TestMorphometrics(unittest.TestCase):
    def _mask(self):
        m = np.zeros((40, 40), dtype=bool)
        m[5:15, 5:15] = True
        m[30, 30] = m[31, 31] = True
        return m

    def test_components_and_aggregates(self):
        mm = morphometrics(self._mask(), pixel_size_nm=10.0, ecd_bin_nm=50.0, large_ecd_nm=100.0)
        self.assertEqual(mm.count, 2)
        areas = sorted(mm.components["area_px"].tolist())
        self.assertEqual(areas, [2, 100])
        big = mm.components.loc[mm.components["area_px"] == 100].iloc[0]
        self.assertAlmostEqual(big["ecd_nm"], 2 * np.sqrt(10000 / np.pi))
        self.assertAlmostEqual(big["centroid_row"], 9.5)
        self.assertEqual(mm.histogram_counts.tolist(), [1, 0, 1])
        self.assertEqual(mm.large_count, 1)
        self.assertAlmostEqual(mm.area_fraction, 102 / 1600)
        self.assertAlmostEqual(mm.number_density_per_nm2, 2 / (1600 * 100.0))
        self.assertAlmostEqual(mm.number_density_per_um2, 2 / 160000.0 * 1e6)

    def test_connectivity_splits_diagonal_pair(self):
        self.assertEqual(morphometrics(self._mask(), 10.0, connectivity=4).count, 3)

    def test_empty_mask(self):
        mm = morphometrics(np.zeros((8, 8), dtype=bool), 5.0)
        self.assertEqual(mm.count, 0)
        self.assertIsNone(mm.summary()["median_ecd_nm"])
        self.assertEqual(int(mm.histogram_counts.sum()), 0)

    def test_validation(self):
        with self.assertRaises(DataError):
            morphometrics(self._mask(), 0.0)
        with self.assertRaises(DataError):
            morphometrics(self._mask(), 1.0, connectivity=6)

    def test_zero_area_image_is_rejected(self):
        for shape in ((0, 0), (0, 12), (7, 0)):
            with self.assertRaises(DataError):
                morphometrics(np.zeros(shape, dtype=bool), 5.0)


if __name__ == "__main__":
    unittest.main()

import tempfile
import unittest
from dataclasses import replace

import numpy as np
from scipy import ndimage

from src.errors import DataError
from src.imagecore import load_mask
from src.synthdata import (
    SceneConfig,
    derive_seed,
    generate_dataset,
    generate_scene,
    load_dataset,
    read_dataset_manifest,
)


SMALL = SceneConfig(height=96, width=96, carbide_count=(4, 8), semi_axis_range=(3.0, 7.0), seed=2)


class TestScene(unittest.TestCase):
    def test_seed_determines_scene(self):
        a_pair, a_mask = generate_scene(SMALL)
        b_pair, b_mask = generate_scene(SMALL)
        self.assertTrue(np.array_equal(a_pair.se.data, b_pair.se.data))
        self.assertTrue(np.array_equal(a_mask, b_mask))
        c_pair, _ = generate_scene(replace(SMALL, seed=3))
        self.assertFalse(np.array_equal(a_pair.se.data, c_pair.se.data))

    def test_carbides_are_separate_and_counted(self):
        for seed in range(5):
            _, mask = generate_scene(replace(SMALL, seed=seed))
            _, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
            self.assertTrue(4 <= n <= 8, n)

    def test_intensities_and_contrast(self):
        pair, mask = generate_scene(SMALL)
        for img in (pair.se, pair.inlens):
            self.assertGreaterEqual(float(img.data.min()), 0.0)
            self.assertLessEqual(float(img.data.max()), 1.0)
        self.assertGreater(float(pair.inlens.data[mask].mean()), float(pair.inlens.data[~mask].mean()) + 0.2)

    def test_no_carbides(self):
        _, mask = generate_scene(replace(SMALL, carbide_count=(0, 0)))
        self.assertFalse(mask.any())

    def test_impossible_layouts_raise(self):
        with self.assertRaises(DataError):
            generate_scene(SceneConfig(height=16, width=16, semi_axis_range=(10.0, 12.0), carbide_count=(1, 1)))
        with self.assertRaises(DataError):
            generate_scene(SceneConfig(height=32, width=32, carbide_count=(200, 200), semi_axis_range=(3.0, 3.0),
                                       max_retries=5))

    def test_config_validation(self):
        with self.assertRaises(DataError):
            SceneConfig(carbide_count=(5, 2))
        with self.assertRaises(DataError):
            SceneConfig(matrix_level=0.9, se_contrast=0.3)
        with self.assertRaises(DataError):
            SceneConfig.from_dict({"carbides": 3})
        cfg = SceneConfig.from_dict({"carbide_count": [1, 2]}, base=SMALL)
        self.assertEqual(cfg.carbide_count, (1, 2))
        self.assertEqual(cfg.height, 96)

    def test_derived_seeds_differ(self):
        seeds = {derive_seed(7, i) for i in range(50)}
        self.assertEqual(len(seeds), 50)
        self.assertEqual(derive_seed(7, 3), derive_seed(7, 3))


class TestDataset(unittest.TestCase):
    def test_generate_and_load(self):
        cfg = replace(SMALL, height=48, width=64, carbide_count=(1, 3))
        with tempfile.TemporaryDirectory() as d:
            generate_dataset(cfg, 3, d, threads=2, pixel_size_nm=6.98)
            manifest = read_dataset_manifest(d)
            self.assertEqual([s["id"] for s in manifest["scenes"]], ["scene_000", "scene_001", "scene_002"])
            self.assertEqual(len({s["seed"] for s in manifest["scenes"]}), 3)
            scenes = load_dataset(d)
            self.assertEqual(len(scenes), 3)
            sid, pair, mask = scenes[1]
            self.assertEqual(pair.shape, (48, 64))
            self.assertEqual(pair.pixel_size_nm, 6.98)
            _, expected = generate_scene(replace(cfg, seed=derive_seed(cfg.seed, 1)))
            self.assertTrue(np.array_equal(mask, expected))
            self.assertTrue(np.array_equal(load_mask(f"{d}/{manifest['scenes'][1]['files']['mask']}"), expected))

    def test_bad_count_and_missing_manifest(self):
        with tempfile.TemporaryDirectory() as d:
            with self.assertRaises(DataError):
                generate_dataset(SMALL, 0, d)
            with self.assertRaises(DataError):
                load_dataset(d)


if __name__ == "__main__":
    unittest.main()

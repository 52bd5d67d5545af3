import unittest

from src.errors import DataError
from src.presets import SCENE_PRESETS, get_material, get_scene_preset
from src.synthdata import SceneConfig


class TestPresets(unittest.TestCase):
    def test_material_pixel_sizes(self):
        self.assertAlmostEqual(get_material("JFL").pixel_size_nm, 6.982, places=3)
        self.assertAlmostEqual(get_material(" anp-10 ").pixel_size_nm, 11500 / 2048)
        with self.assertRaises(DataError):
            get_material("unobtainium")

    def test_scene_presets_build(self):
        for name in SCENE_PRESETS:
            self.assertIsInstance(get_scene_preset(name), SceneConfig)
        self.assertEqual(get_scene_preset("default"), SceneConfig())
        self.assertEqual(get_scene_preset("fullframe").width, 2048)
        self.assertEqual(get_scene_preset("Hard", seed=4).seed, 4)
        with self.assertRaises(DataError):
            get_scene_preset("nope")


if __name__ == "__main__":
    unittest.main()

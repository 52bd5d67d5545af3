import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

from src.config import (
    SchemaCoercer,
    build_run_config,
    build_scene_config,
    load_run_config,
    load_scene_config,
    load_search_space,
)
from src.errors import ConfigError


RUN_TOML = """
[data]
tile_size = 64
split_seed = 3

[unet]
encoder_blocks = 2
base_features = 16

[training]
lr0 = 0.001
max_epochs = 5

[augmentation]
rotations = [0, 180]
"""


class TestRunConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = load_run_config()
        self.assertEqual(cfg.data.tile_size, 128)
        self.assertEqual(cfg.data.split_fractions, (0.8, 0.1, 0.1))
        self.assertEqual(cfg.unet.base_features, 128)
        self.assertEqual(cfg.training.lr0, 2e-4)
        self.assertEqual(cfg.training.early_stop_patience, 14)
        self.assertEqual(cfg.baseline.denoise_sigma, 1.0)
        self.assertEqual(cfg.evaluation.alpha, 0.001)

    def test_demo_config_matches_defaults(self):
        demo = Path(__file__).resolve().parents[1] / "demo" / "run.toml"
        cfg = load_run_config(demo)
        self.assertAlmostEqual(cfg.data.pixel_size_nm, 6.982)
        self.assertEqual(replace(cfg, data=replace(cfg.data, pixel_size_nm=None)), load_run_config())

    def test_file_and_overrides(self):
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "run.toml"
            path.write_text(RUN_TOML, encoding="utf-8")
            cfg = load_run_config(path, [
                "training.lr0=5e-3",
                "data.split_fractions=0.6,0.2,0.2",
                "data.tile_dir=none",
                "training.augment=off",
            ])
        self.assertEqual(cfg.unet.encoder_blocks, 2)
        self.assertEqual(cfg.training.lr0, 5e-3)
        self.assertEqual(cfg.training.max_epochs, 5)
        self.assertFalse(cfg.training.augment)
        self.assertEqual(cfg.data.split_fractions, (0.6, 0.2, 0.2))
        self.assertIsNone(cfg.data.tile_dir)
        self.assertEqual(cfg.augmentation.rotations, frozenset({0, 180}))

        merged = cfg.train_config()
        self.assertIs(merged.unet, cfg.unet)
        self.assertIs(merged.augmentation, cfg.augmentation)
        self.assertEqual(cfg.to_dict()["augmentation"]["rotations"], [0, 180])
        self.assertNotIn("unet", cfg.to_dict()["training"])

    def test_unknown_override_key(self):
        with self.assertRaises(ConfigError) as ctx:
            build_run_config({}, ["training.lr=1"])
        self.assertEqual(ctx.exception.issues[0].code, "CFG_OVERRIDE_VALUE")

    def test_override_syntax_and_type(self):
        with self.assertRaises(ConfigError) as ctx:
            build_run_config({}, ["training.lr0", "training.batch_size=2.5"])
        codes = sorted(i.code for i in ctx.exception.issues)
        self.assertEqual(codes, ["CFG_OVERRIDE_SYNTAX", "CFG_OVERRIDE_VALUE"])

    def test_cross_field_error(self):
        with self.assertRaises(ConfigError) as ctx:
            build_run_config({"data": {"tile_size": 100}})
        self.assertTrue(any(i.code == "CFG_TILE_NOT_DIVISIBLE" for i in ctx.exception.issues))

    def test_warning_is_logged_not_raised(self):
        with self.assertLogs("src.config", level="WARNING"):
            cfg = build_run_config({"data": {"tile_size": 32}, "unet": {"encoder_blocks": 1}})
        self.assertEqual(cfg.data.tile_size, 32)

    def test_bad_files(self):
        with self.assertRaises(ConfigError):
            load_run_config("/nonexistent/run.toml")
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "bad.toml"
            path.write_text("[training\nlr0 = ", encoding="utf-8")
            with self.assertRaises(ConfigError):
                load_run_config(path)


class TestOtherDocuments(unittest.TestCase):
    def test_scene_config_layers_preset_file_and_overrides(self):
        cfg = build_scene_config({"preset": "hard", "height": 64}, ["seed=9"])
        self.assertEqual(cfg.se_contrast, 0.02)
        self.assertEqual((cfg.height, cfg.seed), (64, 9))
        self.assertEqual(build_scene_config({"preset": "hard"}, preset="shifted").matrix_level, 0.45)
        self.assertEqual(load_scene_config().height, 512)

    def test_scene_config_errors(self):
        with self.assertRaises(ConfigError):
            build_scene_config({"carbide_count": [9, 3]})
        with self.assertRaises(ConfigError) as ctx:
            build_scene_config({"matrix_level": 0.9, "se_contrast": 0.3})
        self.assertEqual(ctx.exception.issues[-1].code, "CFG_INVALID_VALUE")
        with self.assertRaises(ConfigError):
            build_scene_config({}, preset="unknown")

    def test_search_space_overrides(self):
        space = load_search_space(overrides=["budget=3", "base_features_choices=4,8"])
        self.assertEqual(space.budget, 3)
        self.assertEqual(space.base_features_choices, (4, 8))


class TestCoercer(unittest.TestCase):
    def test_coercion_rules(self):
        c = SchemaCoercer("run_config")
        self.assertEqual(c.coerce_value("training.batch_size", "8"), (8, None))
        self.assertEqual(c.coerce_value("training.augment", "yes"), (True, None))
        self.assertEqual(c.coerce_value("augmentation.rotations", "[90, 270]"), ([90, 270], None))
        self.assertEqual(c.coerce_value("training.lr0", 0.5), (0.5, None))
        self.assertIsNotNone(c.coerce_value("training.lr0", "fast")[1])
        self.assertIsNotNone(c.coerce_value("nope.key", "1")[1])


if __name__ == "__main__":
    unittest.main()

import unittest
from src.validation import validate_document, validate_ordered_ranges, validate_run_config


class TestValidation(unittest.TestCase):
    def test_unknown_key_is_error(self):
        issues = validate_document({"training": {"lr": 1e-3}}, "run_config")
        self.assertTrue(any(i.code == "CFG_UNKNOWN_KEY" and i.severity == "error" for i in issues))

    def test_wrong_type_is_schema_error_with_field(self):
        issues = validate_document({"training": {"batch_size": "big"}}, "run_config")
        self.assertEqual(len(issues), 1)
        self.assertEqual(issues[0].code, "CFG_SCHEMA")
        self.assertEqual(issues[0].field, "training.batch_size")

    def test_empty_run_config_is_valid(self):
        self.assertEqual(validate_document({}, "run_config"), [])
        self.assertEqual(validate_run_config({}), [])

    def test_split_fractions_must_sum_to_one(self):
        issues = validate_run_config({"data": {"split_fractions": [0.7, 0.1, 0.1]}})
        self.assertTrue(any(i.code == "CFG_SPLIT_SUM" and i.severity == "error" for i in issues))

    def test_even_kernel_is_error(self):
        issues = validate_run_config({"unet": {"kernel_size": 4}})
        self.assertTrue(any(i.code == "CFG_KERNEL_EVEN" for i in issues))

    def test_tile_size_not_divisible_by_depth(self):
        issues = validate_run_config({"data": {"tile_size": 100}, "unet": {"encoder_blocks": 3}})
        self.assertTrue(any(i.code == "CFG_TILE_NOT_DIVISIBLE" for i in issues))

    def test_large_tophat_radius_is_warning(self):
        issues = validate_run_config({"data": {"tile_size": 32}, "unet": {"encoder_blocks": 1}})
        warn = [i for i in issues if i.code == "CFG_TOPHAT_RADIUS_LARGE"]
        self.assertEqual(len(warn), 1)
        self.assertEqual(warn[0].severity, "warning")

    def test_reversed_blur_range(self):
        issues = validate_run_config({"augmentation": {"blur_sigma_range": [1.5, 0.5]}})
        self.assertTrue(any(i.code == "CFG_RANGE_ORDER" for i in issues))

    def test_ordered_ranges(self):
        doc = {"carbide_count": [40, 20], "semi_axis_range": [5, 12]}
        issues = validate_ordered_ranges(doc, ["carbide_count", "semi_axis_range"])
        self.assertEqual([i.field for i in issues], ["carbide_count"])

    def test_tile_manifest_rejects_bad_split_name(self):
        manifest = {
            "format": "carbseg-tiles/1",
            "tile_size": 4,
            "tiles": [{
                "id": "a_r00000_c00000",
                "source_id": "a",
                "origin": [0, 0],
                "files": {"se": "s.png", "inlens": "i.png", "mask": "m.png"},
                "split": "holdout",
            }],
        }
        issues = validate_document(manifest, "tile_manifest")
        self.assertTrue(issues)


if __name__ == "__main__":
    unittest.main()

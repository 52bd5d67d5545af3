import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.errors import DataError
from src.tensorio import decode_tensors, encode_tensors, load_array, load_checkpoint, save_checkpoint, save_tensors
from src.tensornet import UNetConfig, adam_step, build_unet, forward


class TestTensorContainer(unittest.TestCase):
    def test_checkpoint_round_trip_is_bit_exact(self):
        cfg = UNetConfig(encoder_blocks=2, base_features=4, mve_head=True)
        store = build_unet(cfg, seed=7)
        store.step = 12
        x = np.random.default_rng(0).random((2, 2, 8, 8)).astype(np.float32)
        forward(store, x, mode="train")
        with tempfile.TemporaryDirectory() as d:
            path = save_checkpoint(Path(d) / "net.cseg", store, meta={"epoch": 3})
            back, meta = load_checkpoint(path)
        self.assertEqual(back.cfg, cfg)
        self.assertEqual(back.step, 12)
        self.assertEqual(meta["epoch"], 3)
        self.assertEqual(sorted(back.params), sorted(store.params))
        self.assertEqual(sorted(back.buffers), sorted(store.buffers))
        for k, v in store.params.items():
            self.assertEqual(back.params[k].tobytes(), v.tobytes())
        for k, v in store.buffers.items():
            self.assertEqual(back.buffers[k].tobytes(), v.tobytes())
        self.assertTrue(np.array_equal(forward(back, x), forward(store, x)))

    def test_resumed_adam_step_matches_uninterrupted(self):
        cfg = UNetConfig(encoder_blocks=1, base_features=4)
        store = build_unet(cfg, seed=1)
        grads = {k: np.full_like(v, 0.5) for k, v in store.params.items()}
        for _ in range(40):
            adam_step(store, grads, lr=1e-3)
        with tempfile.TemporaryDirectory() as d:
            back, _ = load_checkpoint(save_checkpoint(Path(d) / "net.cseg", store))
        self.assertEqual(back.step, 40)
        for k in store.params:
            self.assertEqual(back.adam_m[k].tobytes(), store.adam_m[k].tobytes())
            self.assertEqual(back.adam_v[k].tobytes(), store.adam_v[k].tobytes())
        adam_step(store, grads, lr=1e-3)
        adam_step(back, grads, lr=1e-3)
        self.assertEqual(back.step, 41)
        for k, v in store.params.items():
            self.assertEqual(back.params[k].tobytes(), v.tobytes())

    def test_checkpoint_without_moments_restarts_step_count(self):
        store = build_unet(UNetConfig(encoder_blocks=1, base_features=4), seed=1)
        store.step = 1000
        tensors = dict(store.params)
        roles = {k: "param" for k in store.params}
        for k, b in store.buffers.items():
            tensors[k] = b
            roles[k] = "buffer"
        data = encode_tensors(tensors, config=store.cfg.to_dict(), roles=roles, meta={"adam_step": 1000})
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "old.cseg"
            path.write_bytes(data)
            back, meta = load_checkpoint(path)
        self.assertEqual(back.step, 0)
        self.assertEqual(meta["adam_step"], 1000)

    def test_bad_magic_and_truncation(self):
        with self.assertRaises(DataError):
            decode_tensors(b"XXXX\x00\x00\x00\x00")
        data = encode_tensors({"a": np.ones((3, 3))})
        with self.assertRaises(DataError):
            decode_tensors(data[:-4])

    def test_plain_container_is_not_a_checkpoint(self):
        with tempfile.TemporaryDirectory() as d:
            path = save_tensors(Path(d) / "logits.cseg", {"logits": np.zeros((2, 4, 4))})
            self.assertEqual(load_array(path).shape, (2, 4, 4))
            with self.assertRaises(DataError):
                load_checkpoint(path)
            with self.assertRaises(DataError):
                load_array(path, "targets")

    def test_missing_file(self):
        with self.assertRaises(DataError):
            load_checkpoint("/nonexistent/net.cseg")


if __name__ == "__main__":
    unittest.main()

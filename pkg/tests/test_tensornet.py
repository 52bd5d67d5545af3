import unittest

import numpy as np

from src.errors import DataError, NumericalError
from src.tensornet import (
    ParameterStore,
    UNetConfig,
    adam_step,
    backward,
    batchnorm_backward,
    batchnorm_forward,
    build_unet,
    concat_backward,
    concat_forward,
    conv2d_backward,
    conv2d_forward,
    conv_parameter_count,
    conv_transpose2x2_backward,
    conv_transpose2x2_forward,
    count_parameters,
    forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    upsample_nearest_backward,
    upsample_nearest_forward,
)


H = 1e-5


def numeric_grad(f, arr, h=H, max_entries=None, rng=None):
    """Central differences of scalar f() w.r.t. arr (perturbed in place)."""
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[int(i)] = (up - down) / (2 * h)
    return out


def max_rel_error(analytic, numeric):
    flat = analytic.reshape(-1)
    worst = 0.0
    for i, n in numeric.items():
        a = flat[i]
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-3))
    return worst


class TestParameterCount(unittest.TestCase):
    def test_default_config_matches_published_size(self):
        n = count_parameters(UNetConfig())
        self.assertEqual(n, 30_789_377)
        self.assertTrue(30.1e6 <= n <= 31.3e6)

    def test_tiny_config_hand_count(self):
        # enc 204 + bottleneck 912 + up 132 + dec block 456 + head 5
        self.assertEqual(count_parameters(UNetConfig(in_channels=1, encoder_blocks=1, base_features=4)), 1709)

    def test_smallest_layer(self):
        self.assertEqual(conv_parameter_count(1, 1, 1), 2)

    def test_quadratic_in_width(self):
        ratio = count_parameters(UNetConfig(base_features=64)) / count_parameters(UNetConfig(base_features=32))
        self.assertTrue(3.8 < ratio < 4.0, ratio)

    def test_allocation_matches_closed_form(self):
        for blocks in (1, 2, 3, 4):
            for features in (4, 8, 16):
                for upsample in ("transpose", "nearest"):
                    cfg = UNetConfig(encoder_blocks=blocks, base_features=features, upsample=upsample)
                    self.assertEqual(build_unet(cfg).trainable_count(), count_parameters(cfg))

    def test_running_stats_not_trainable(self):
        store = build_unet(UNetConfig(encoder_blocks=1, base_features=4))
        self.assertTrue(store.buffers)
        self.assertFalse(set(store.buffers) & set(store.params))
        for name, p in store.params.items():
            self.assertEqual(store.grads[name].shape, p.shape)
            self.assertEqual(store.adam_m[name].shape, p.shape)

    def test_config_validation(self):
        with self.assertRaises(DataError):
            UNetConfig(kernel_size=4)
        with self.assertRaises(DataError):
            UNetConfig(encoder_blocks=0)


class TestPrimitiveGradients(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def _check(self, f, arrays, grads, tol=1e-5):
        for name, arr in arrays.items():
            num = numeric_grad(f, arr, max_entries=40, rng=self.rng)
            self.assertLess(max_rel_error(grads[name], num), tol, name)

    def test_conv2d(self):
        x = self.rng.normal(size=(2, 3, 6, 5))
        w = self.rng.normal(size=(4, 3, 3, 3))
        b = self.rng.normal(size=4)
        r = self.rng.normal(size=(2, 4, 6, 5))
        f = lambda: float((conv2d_forward(x, w, b)[0] * r).sum())
        dx, dw, db = conv2d_backward(r, conv2d_forward(x, w, b)[1])
        self._check(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})

    def test_batchnorm_train(self):
        x = self.rng.normal(size=(3, 2, 4, 4))
        gamma = self.rng.normal(size=2)
        beta = self.rng.normal(size=2)
        r = self.rng.normal(size=x.shape)

        def f():
            out, _ = batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), "train", update_stats=False)
            return float((out * r).sum())

        _, cache = batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), "train", update_stats=False)
        dx, dg, db = batchnorm_backward(r, cache)
        self._check(f, {"x": x, "gamma": gamma, "beta": beta}, {"x": dx, "gamma": dg, "beta": db})

    def test_conv_transpose(self):
        x = self.rng.normal(size=(2, 3, 3, 4))
        w = self.rng.normal(size=(3, 2, 2, 2))
        b = self.rng.normal(size=2)
        r = self.rng.normal(size=(2, 2, 6, 8))
        f = lambda: float((conv_transpose2x2_forward(x, w, b)[0] * r).sum())
        dx, dw, db = conv_transpose2x2_backward(r, conv_transpose2x2_forward(x, w, b)[1])
        self._check(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})

    def test_maxpool_and_upsample(self):
        x = self.rng.permutation(64).reshape(1, 1, 8, 8).astype(np.float64)
        r = self.rng.normal(size=(1, 1, 4, 4))
        f = lambda: float((maxpool_forward(x)[0] * r).sum())
        dx = maxpool_backward(r, maxpool_forward(x)[1])
        self._check(f, {"x": x}, {"x": dx})

        y = self.rng.normal(size=(2, 2, 3, 3))
        ru = self.rng.normal(size=(2, 2, 6, 6))
        fu = lambda: float((upsample_nearest_forward(y) * ru).sum())
        self._check(fu, {"y": y}, {"y": upsample_nearest_backward(ru)})

    def test_maxpool_routes_to_argmax_only(self):
        x = self.rng.normal(size=(2, 3, 6, 6))
        out, cache = maxpool_forward(x)
        d = self.rng.normal(size=out.shape)
        dx = maxpool_backward(d, cache)
        self.assertAlmostEqual(float(dx.sum()), float(d.sum()), places=12)
        self.assertEqual(int(np.count_nonzero(dx)), d.size)
        self.assertTrue(np.allclose(np.sort(x[dx != 0]), np.sort(out.ravel())))

    def test_relu_dead_unit_gets_no_gradient(self):
        x = -np.abs(self.rng.normal(size=(1, 2, 3, 3))) - 0.1
        _, active = relu_forward(x)
        self.assertFalse(relu_backward(np.ones_like(x), active).any())

    def test_concat_preserves_operands(self):
        a = self.rng.normal(size=(2, 3, 4, 4))
        b = self.rng.normal(size=(2, 5, 4, 4))
        cat = concat_forward(a, b)
        da, db = concat_backward(cat, 3)
        self.assertTrue(np.array_equal(da, a))
        self.assertTrue(np.array_equal(db, b))

    def test_identity_impulse_kernel(self):
        x = self.rng.normal(size=(1, 2, 5, 5))
        w = np.zeros((1, 2, 3, 3))
        w[0, 1, 1, 1] = 1.0
        out, _ = conv2d_forward(x, w, np.zeros(1))
        self.assertTrue(np.allclose(out[0, 0], x[0, 1]))


class TestNetwork(unittest.TestCase):
    def _loss(self, store, x, r):
        return float((forward(store, x, mode="train", update_stats=False) * r).sum())

    def _gradcheck(self, cfg, tol):
        rng = np.random.default_rng(1)
        store = build_unet(cfg, seed=3, dtype=np.float64)
        x = rng.random((2, cfg.in_channels, 16, 16))
        r = rng.normal(size=(2, cfg.head_channels, 16, 16))
        store.zero_grad()
        forward(store, x, mode="train", update_stats=False)
        backward(store, r)
        for name in store.names():
            num = numeric_grad(lambda: self._loss(store, x, r), store.params[name], h=1e-6, max_entries=6, rng=rng)
            self.assertLess(max_rel_error(store.grads[name], num), tol, name)
        return store, x, r

    def test_composed_gradients_float64(self):
        self._gradcheck(UNetConfig(in_channels=1, encoder_blocks=1, base_features=4), 1e-5)

    def test_composed_gradients_nearest_upsample_and_mve(self):
        self._gradcheck(UNetConfig(encoder_blocks=2, base_features=2, upsample="nearest", mve_head=True), 1e-5)

    def test_float32_gradients_track_float64(self):
        store64, x, r = self._gradcheck(UNetConfig(in_channels=1, encoder_blocks=1, base_features=4), 1e-5)
        store64.zero_grad()
        forward(store64, x, mode="train", update_stats=False)
        backward(store64, r)
        store32 = store64.astype(np.float32)
        store32.zero_grad()
        forward(store32, x, mode="train", update_stats=False)
        backward(store32, r)
        for name in store64.names():
            ref = store64.grads[name]
            err = np.linalg.norm(store32.grads[name] - ref) / max(np.linalg.norm(ref), 1e-6)
            self.assertLess(err, 1e-3, name)

    def test_output_shape(self):
        store = build_unet(UNetConfig(encoder_blocks=2, base_features=4))
        out = forward(store, np.zeros((4, 2, 32, 32), dtype=np.float32))
        self.assertEqual(out.shape, (4, 1, 32, 32))
        mve = build_unet(UNetConfig(encoder_blocks=1, base_features=4, mve_head=True))
        self.assertEqual(forward(mve, np.zeros((1, 2, 8, 8))).shape, (1, 2, 8, 8))

    def test_eval_is_pure_and_train_touches_only_running_stats(self):
        store = build_unet(UNetConfig(encoder_blocks=1, base_features=4), seed=5)
        x = np.random.default_rng(0).random((2, 2, 8, 8)).astype(np.float32)
        before = store.snapshot()
        a = forward(store, x, mode="eval")
        b = forward(store, x, mode="eval")
        self.assertTrue(np.array_equal(a, b))
        self.assertIsNone(store.tape)
        for k, v in before["buffers"].items():
            self.assertTrue(np.array_equal(store.buffers[k], v))

        forward(store, x, mode="train")
        for k, v in before["params"].items():
            self.assertTrue(np.array_equal(store.params[k], v))
        changed = [k for k, v in before["buffers"].items() if not np.array_equal(store.buffers[k], v)]
        self.assertTrue(changed)

    def test_same_seed_same_init(self):
        cfg = UNetConfig(encoder_blocks=1, base_features=4)
        a, b = build_unet(cfg, seed=9), build_unet(cfg, seed=9)
        for name in a.names():
            self.assertTrue(np.array_equal(a.params[name], b.params[name]))

    def test_shape_errors(self):
        store = build_unet(UNetConfig(encoder_blocks=2, base_features=4))
        with self.assertRaises(DataError):
            forward(store, np.zeros((1, 2, 10, 8)))
        with self.assertRaises(DataError):
            forward(store, np.zeros((1, 3, 8, 8)))

    def test_backward_needs_train_forward(self):
        store = build_unet(UNetConfig(encoder_blocks=1, base_features=4))
        forward(store, np.zeros((1, 2, 8, 8)), mode="eval")
        with self.assertRaises(NumericalError):
            backward(store, np.zeros((1, 1, 8, 8)))

    def test_zero_upstream_gradient(self):
        store = build_unet(UNetConfig(encoder_blocks=1, base_features=4))
        store.zero_grad()
        forward(store, np.random.default_rng(0).random((2, 2, 8, 8)), mode="train")
        backward(store, np.zeros((2, 1, 8, 8)))
        self.assertTrue(all(not g.any() for g in store.grads.values()))


class TestAdam(unittest.TestCase):
    def _scalar_store(self, value=0.0):
        store = ParameterStore(UNetConfig(encoder_blocks=1, base_features=1), np.float64)
        store.add("w", np.array([value]))
        return store

    def test_first_step_is_lr_sized(self):
        store = self._scalar_store()
        adam_step(store, {"w": np.array([1.0])}, lr=0.1, t=1)
        self.assertAlmostEqual(float(store.params["w"][0]), -0.1, places=6)
        self.assertEqual(store.step, 1)

    def test_zero_gradient_is_fixed_point(self):
        store = self._scalar_store(2.5)
        for _ in range(3):
            adam_step(store, {"w": np.array([0.0])}, lr=0.1)
        self.assertEqual(float(store.params["w"][0]), 2.5)

    def test_non_finite_gradient_aborts(self):
        store = self._scalar_store()
        with self.assertRaises(NumericalError):
            adam_step(store, {"w": np.array([np.nan])})

    def test_deterministic_training_steps(self):
        cfg = UNetConfig(encoder_blocks=1, base_features=4)
        x = np.random.default_rng(2).random((2, 2, 8, 8)).astype(np.float32)
        stores = []
        for _ in range(2):
            s = build_unet(cfg, seed=4)
            for _ in range(2):
                s.zero_grad()
                out = forward(s, x, mode="train")
                backward(s, np.ones_like(out) / out.size)
                adam_step(s, lr=1e-2)
            stores.append(s)
        for name in stores[0].names():
            self.assertTrue(np.array_equal(stores[0].params[name], stores[1].params[name]))


if __name__ == "__main__":
    unittest.main()

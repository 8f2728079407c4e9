import os
import tempfile
import unittest

import numpy as np

from src.denoiser.config import DiTConfig
from src.denoiser.dit import DenoiserParams, forward, forward_ablation, init
from src.errors import ConfigError, ContractError, DimensionError
from src.tensor.tensor import Tensor, backward


def small_config(**overrides):
    values = dict(dim=16, depth=1, heads=2, dim_head=8, mlp_ratio=2.0, dropout=0.0, seq_len=8, num_cells=2,
                  time_embed_dim=8)
    values.update(overrides)
    return DiTConfig(**values)


def randomize(params, seed):
    rng = np.random.default_rng(seed)
    for _, tensor in params.items():
        tensor.data = rng.normal(0.0, 0.3, size=tensor.shape).astype(tensor.dtype)
    return params


class TestDenoiser(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_zero_output_at_init(self):
        for config in (small_config(), small_config(stem="linear", pos_embedding="rope"),
                       small_config(stem="linear", pos_embedding="learned")):
            params = init(config, seed=3, dtype=np.float64)
            x = self.rng.standard_normal((3, 4, 8)) * 10
            out = forward(params, x, [0, 5, 99], [0, 1, 2])
            np.testing.assert_array_equal(out.data, np.zeros((3, 4, 8)))

    def test_zero_init_layers(self):
        params = init(small_config(depth=2), seed=0)
        for name in ("block0.ada.w", "block1.ada.w", "final.ada.w", "final.out.w", "final.out.b"):
            self.assertFalse(np.any(params[name].data), name)
        self.assertEqual(params["cell.table"].shape, (3, 16))

    def test_output_shapes(self):
        for length in (8, 64, 200):
            params = randomize(init(small_config(seq_len=length), seed=0), 1)
            x = self.rng.standard_normal((4, length)).astype(np.float32)
            self.assertEqual(forward(params, x, 7, 1).shape, (4, length))
        with self.assertRaises(DimensionError):
            forward(params, np.zeros((4, 10)), 0, 0)

    def test_same_seed_same_params(self):
        a, b = init(small_config(), seed=9), init(small_config(), seed=9)
        for name, tensor in a.items():
            np.testing.assert_array_equal(tensor.data, b[name].data)

    def test_full_scale_parameter_count(self):
        d, inner, hidden, te, length, cells = 320, 8 * 48, 1600, 32, 200, 4
        linear = lambda fan_in, fan_out: fan_in * fan_out + fan_out
        per_block = linear(d, 6 * d) + linear(d, 3 * inner) + linear(inner, d) + linear(d, hidden) + linear(hidden, d)
        expected = (d * 5 * 4 + d + length * d + te // 2 + linear(te, d) + linear(d, d) + (cells + 1) * d
                    + 6 * per_block + linear(d, 2 * d) + linear(d, 4))
        self.assertEqual(init(DiTConfig(), seed=0).count(), expected)

    def test_gradient_matches_finite_differences(self):
        params = randomize(init(small_config(), seed=0, dtype=np.float64), 4)
        x = self.rng.standard_normal((2, 4, 8))
        target = self.rng.standard_normal((2, 4, 8))
        t, cells = np.array([1, 4]), np.array([0, 2])

        def loss():
            diff = forward(params, x, t, cells) - Tensor(target)
            return (diff * diff).mean()

        backward(loss())
        h = 1e-5
        for name, tensor in params.items():
            analytic = tensor.grad
            flat = tensor.data.reshape(-1)
            picks = self.rng.choice(flat.size, size=min(4, flat.size), replace=False)
            scale = max(np.abs(analytic).max(), 1e-8)
            for i in picks:
                saved = flat[i]
                flat[i] = saved + h
                plus = loss().item()
                flat[i] = saved - h
                minus = loss().item()
                flat[i] = saved
                numeric = (plus - minus) / (2 * h)
                self.assertLess(abs(numeric - analytic.reshape(-1)[i]) / scale, 1e-4, name)

    def test_cell_permutation_invariance(self):
        params = randomize(init(small_config(), seed=0, dtype=np.float64), 5)
        x = self.rng.standard_normal((2, 4, 8))
        before = forward(params, x, 2, [0, 1]).data
        table = params["cell.table"].data
        params["cell.table"].data = table[[1, 0, 2]]
        after = forward(params, x, 2, [1, 0]).data
        np.testing.assert_allclose(after, before, atol=1e-12)

    def test_dropout_needs_rng(self):
        params = init(small_config(dropout=0.1), seed=0)
        with self.assertRaises(ContractError):
            forward(params, np.zeros((4, 8)), 0, 0, train_mode=True)
        forward(params, np.zeros((4, 8)), 0, 0, train_mode=True, rng=np.random.default_rng(0))

    def test_forward_ablation(self):
        params = randomize(init(small_config(stem="linear", pos_embedding="rope"), seed=0, dtype=np.float64), 6)
        x = self.rng.standard_normal((4, 8))
        np.testing.assert_array_equal(forward_ablation(params, x, 3, 1).data, forward(params, x, 3, 1).data)
        self.assertNotIn("pos.table", params)
        with self.assertRaises(ContractError):
            forward_ablation(init(small_config(), seed=0), x, 3, 1)

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            small_config(pos_embedding="rope").validate()
        with self.assertRaises(ConfigError):
            small_config(kernel=(4, 4)).validate()
        with self.assertRaises(ConfigError):
            small_config(depth=0).validate()
        with self.assertRaises(ValueError):
            small_config(stem="unet")

    def test_save_load(self):
        params = randomize(init(small_config(), seed=0), 8)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.rgdf")
            params.save(path, sidecar={"epoch": 3})
            loaded, meta, _ = DenoiserParams.load(path)
        self.assertEqual(meta["epoch"], 3)
        self.assertEqual(loaded.config, params.config)
        for name, tensor in params.items():
            np.testing.assert_array_equal(loaded[name].data, tensor.data)


if __name__ == "__main__":
    unittest.main()

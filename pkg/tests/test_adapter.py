"""Projection MLP: architecture, forward math, gradients, training loop,
and checkpoint round-trips.

The forward oracle below is a deliberately independent straight-line
reimplementation (explicit loops, no shared helpers) so the two code
paths can only agree by computing the same function.
"""

import math

import numpy as np
import pytest

from clipaway.adapter import (
    CANONICAL_WIDTHS,
    AdapterTrainingConfig,
    ProjectionAdapter,
    compute_loss_and_grad,
    load_adapter,
    save_adapter,
    train_projection_adapter,
)
from clipaway.embedding import Embedding, EmbeddingSpace
from clipaway.encoders import MockPlainEncoder, MockRegionEncoder
from clipaway.errors import (
    DimensionMismatchError,
    EncoderSpaceMismatchError,
    FormatVersionMismatchError,
    LayerShapeMismatchError,
    NonFiniteLossError,
    NonFiniteParametersError,
)

TINY_WIDTHS = ((4, 4), (4, 4), (4, 6), (6, 6), (6, 6), (6, 6), (6, 6))


def reference_forward(adapter, x):
    """Hand-rolled forward: explicit loops over the layer table."""
    h = [float(v) for v in x]
    n_layers = len(adapter.layers)
    for li, layer in enumerate(adapter.layers):
        w = layer.w
        out = []
        for row in range(w.shape[0]):
            acc = float(layer.b[row])
            for col in range(w.shape[1]):
                acc += float(w[row, col]) * h[col]
            out.append(acc)
        if li < n_layers - 1:
            mean = sum(out) / len(out)
            var = sum((v - mean) ** 2 for v in out) / len(out)
            inv = 1.0 / math.sqrt(var + 1e-5)
            out = [
                float(layer.gamma[k]) * (v - mean) * inv + float(layer.beta[k])
                for k, v in enumerate(out)
            ]
            out = [0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in out]
        h = out
    return np.array(h)


class TestArchitecture:
    def test_layer_table_matches_published_design(self):
        adapter = ProjectionAdapter(seed=0)
        table = adapter.layer_table()
        assert len(table) == 7
        assert [(i, o) for i, o, _ in table] == list(CANONICAL_WIDTHS)
        assert [flag for _, _, flag in table] == [True] * 6 + [False]

    def test_output_dim_is_1024(self):
        adapter = ProjectionAdapter(seed=0)
        e = Embedding(np.random.default_rng(0).standard_normal(768).astype(np.float32),
                      EmbeddingSpace.ALPHA_CLIP_768)
        out = adapter.forward(e)
        assert out.dim == 1024
        assert out.space is EmbeddingSpace.ADAPTER_1024

    def test_widths_must_chain(self):
        with pytest.raises(LayerShapeMismatchError):
            ProjectionAdapter(widths=((768, 768), (512, 1024)))


class TestForward:
    def test_zero_final_layer_gives_zero_output(self):
        adapter = ProjectionAdapter(seed=3)
        adapter.layers[-1].w[:] = 0.0
        adapter.layers[-1].b[:] = 0.0
        adapter.mark_updated()
        x = np.random.default_rng(1).standard_normal(768)
        np.testing.assert_array_equal(adapter.forward_array(x), np.zeros(1024))

    def test_deterministic(self):
        adapter = ProjectionAdapter(seed=4)
        e = Embedding(np.random.default_rng(2).standard_normal(768).astype(np.float32),
                      EmbeddingSpace.ALPHA_CLIP_768)
        a = adapter.forward(e)
        b = adapter.forward(e)
        assert a.values.tobytes() == b.values.tobytes()

    def test_matches_reference_on_tiny_network(self, rng):
        adapter = ProjectionAdapter(widths=TINY_WIDTHS, seed=5)
        for _ in range(20):
            x = rng.standard_normal(4)
            got = adapter.forward_array(x)
            want = reference_forward(adapter, x)
            np.testing.assert_allclose(got, want, atol=1e-5)

    def test_matches_reference_on_basis_vector_full_width(self):
        adapter = ProjectionAdapter(seed=6)
        x = np.zeros(768)
        x[17] = 1.0
        np.testing.assert_allclose(
            adapter.forward_array(x), reference_forward(adapter, x), atol=1e-5
        )

    def test_batch_equals_per_item_bitwise(self, rng):
        adapter = ProjectionAdapter(seed=7)
        xs = rng.standard_normal((5, 768))
        batch = adapter.forward_batch(xs)
        for i in range(5):
            single = adapter.forward_array(xs[i])
            assert batch[i].tobytes() == single.tobytes()

    def test_wrong_input_width(self):
        adapter = ProjectionAdapter(seed=8)
        with pytest.raises(DimensionMismatchError):
            adapter.forward_array(np.zeros(1024))

    def test_nan_parameters_rejected(self):
        adapter = ProjectionAdapter(seed=9)
        adapter.theta[100] = np.nan
        adapter.mark_updated()
        with pytest.raises(NonFiniteParametersError):
            adapter.forward_array(np.zeros(768))


class TestGradients:
    def test_analytic_matches_central_differences(self, rng):
        adapter = ProjectionAdapter(widths=TINY_WIDTHS, seed=10)
        xs = rng.standard_normal((4, 4))
        ys = rng.standard_normal((4, 6))
        _, analytic = compute_loss_and_grad(adapter, xs, ys)

        h = 1e-4
        theta = adapter.theta
        for i in range(theta.size):
            orig = theta[i]
            theta[i] = orig + h
            lp, _ = compute_loss_and_grad(adapter, xs, ys)
            theta[i] = orig - h
            lm, _ = compute_loss_and_grad(adapter, xs, ys)
            theta[i] = orig
            fd = (lp - lm) / (2 * h)
            denom = max(abs(analytic[i]), abs(fd), 1e-8)
            assert abs(analytic[i] - fd) / denom <= 1e-4, (
                f"param {i}: analytic {analytic[i]:.3e} vs fd {fd:.3e}"
            )


def _tiny_images(rng, n, size=16):
    return [rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8) for _ in range(n)]


class _ConstantTarget:
    """Stub plain encoder returning a fixed vector for every image."""

    input_resolution = 224
    output_space = EmbeddingSpace.ADAPTER_1024

    def __init__(self, c):
        self._e = Embedding(np.asarray(c, dtype=np.float32), EmbeddingSpace.ADAPTER_1024)

    def encode_plain(self, pixels):
        return self._e


class TestTraining:
    def test_default_config_matches_published_recipe(self):
        cfg = AdapterTrainingConfig()
        assert cfg.learning_rate == 1e-5
        assert cfg.weight_decay == 1e-4
        assert cfg.batch_size == 8
        assert cfg.total_steps == 300_000

    def test_zero_learning_rate_is_a_no_op(self, rng):
        images = _tiny_images(rng, 1)
        cfg = AdapterTrainingConfig(learning_rate=0.0, total_steps=20, batch_size=2, seed=1)
        adapter = ProjectionAdapter(seed=1)
        before = adapter.theta.copy()
        result = train_projection_adapter(
            images, MockRegionEncoder(), MockPlainEncoder(), cfg, adapter=adapter
        )
        np.testing.assert_array_equal(result.adapter.theta, before)
        assert np.unique(result.losses).size == 1

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(ValueError):
            AdapterTrainingConfig(learning_rate=-1e-5)

    def test_loss_decreases_on_memorization(self, rng):
        c = rng.standard_normal(1024) * 2.0
        images = _tiny_images(rng, 1)
        cfg = AdapterTrainingConfig(
            learning_rate=1e-3, weight_decay=0.0, total_steps=300, batch_size=1, seed=2
        )
        adapter = ProjectionAdapter(seed=2, dtype=np.float32)
        result = train_projection_adapter(
            images, MockRegionEncoder(), _ConstantTarget(c), cfg, adapter=adapter
        )
        assert result.losses[-1] < 0.2 * result.losses[0]

    def test_identical_seeds_give_identical_loss_history(self, rng):
        images = _tiny_images(rng, 4)
        def run():
            cfg = AdapterTrainingConfig(
                learning_rate=1e-4, total_steps=30, batch_size=2, seed=11
            )
            adapter = ProjectionAdapter(seed=11, dtype=np.float32)
            return train_projection_adapter(
                images, MockRegionEncoder(), MockPlainEncoder(), cfg, adapter=adapter
            ).losses
        a, b = run(), run()
        assert a.tobytes() == b.tobytes()

    def test_moving_average_trend(self, rng):
        # 64 synthetic pairs; the 100-step moving average of the loss at
        # step 2000 must sit strictly below the average around step 100.
        images = _tiny_images(rng, 64)
        cfg = AdapterTrainingConfig(
            learning_rate=1e-4, total_steps=2000, batch_size=8, seed=12
        )
        adapter = ProjectionAdapter(seed=12, dtype=np.float32)
        result = train_projection_adapter(
            images, MockRegionEncoder(), MockPlainEncoder(), cfg, adapter=adapter
        )
        losses = result.losses
        early = losses[:100].mean()
        late = losses[1900:2000].mean()
        assert late < early

    def test_encoder_space_mismatch(self, rng):
        images = _tiny_images(rng, 1)
        cfg = AdapterTrainingConfig(total_steps=1)
        with pytest.raises(EncoderSpaceMismatchError):
            train_projection_adapter(
                images, MockPlainEncoder(), MockPlainEncoder(), cfg
            )
        with pytest.raises(EncoderSpaceMismatchError):
            train_projection_adapter(
                images, MockRegionEncoder(), MockRegionEncoder(), cfg
            )

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_projection_adapter(
                [], MockRegionEncoder(), MockPlainEncoder(), AdapterTrainingConfig()
            )

    def test_non_finite_loss_aborts(self, rng):
        images = _tiny_images(rng, 1)
        adapter = ProjectionAdapter(seed=13)
        adapter.theta[0] = np.nan
        cfg = AdapterTrainingConfig(total_steps=5)
        with pytest.raises(NonFiniteLossError):
            train_projection_adapter(
                images, MockRegionEncoder(), MockPlainEncoder(), cfg, adapter=adapter
            )

    def test_loss_csv_export(self, rng, tmp_path):
        images = _tiny_images(rng, 2)
        cfg = AdapterTrainingConfig(learning_rate=1e-4, total_steps=5, batch_size=1, seed=3)
        result = train_projection_adapter(
            images, MockRegionEncoder(), MockPlainEncoder(), cfg,
            adapter=ProjectionAdapter(seed=3, dtype=np.float32),
        )
        path = tmp_path / "loss.csv"
        result.save_loss_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 6
        step, loss = lines[1].split(",")
        assert step == "1"
        assert float(loss) == result.losses[0]


class TestCheckpoints:
    def test_round_trip_outputs_bit_identical(self, rng, tmp_path):
        adapter = ProjectionAdapter(seed=20)
        path = tmp_path / "adapter.npz"
        save_adapter(adapter, path)
        loaded = load_adapter(path)
        for _ in range(10):
            x = rng.standard_normal(768)
            assert adapter.forward_array(x).tobytes() == loaded.forward_array(x).tobytes()

    def test_wrong_widths_rejected(self, tmp_path):
        narrow = ProjectionAdapter(
            widths=((768, 512), (512, 512), (512, 1024), (1024, 1024),
                    (1024, 1024), (1024, 1024), (1024, 1024)),
            seed=21,
        )
        path = tmp_path / "narrow.npz"
        save_adapter(narrow, path)
        with pytest.raises(LayerShapeMismatchError):
            load_adapter(path)
        # accepting the file's own table is an explicit opt-in
        assert load_adapter(path, expected_widths=None).widths == narrow.widths

    def test_truncated_file_rejected(self, tmp_path):
        adapter = ProjectionAdapter(widths=TINY_WIDTHS, seed=22)
        path = tmp_path / "adapter.npz"
        save_adapter(adapter, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatVersionMismatchError):
            load_adapter(path, expected_widths=TINY_WIDTHS)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(FormatVersionMismatchError):
            load_adapter(path)

    def test_periodic_checkpoint_during_training(self, rng, tmp_path):
        images = _tiny_images(rng, 2)
        ckpt = tmp_path / "train.npz"
        cfg = AdapterTrainingConfig(
            learning_rate=1e-4, total_steps=10, batch_size=1, seed=4,
            checkpoint_interval=5, checkpoint_path=str(ckpt),
        )
        result = train_projection_adapter(
            images, MockRegionEncoder(), MockPlainEncoder(), cfg,
            adapter=ProjectionAdapter(seed=4, dtype=np.float32),
        )
        assert ckpt.exists()
        loaded = load_adapter(ckpt)
        np.testing.assert_array_equal(loaded.theta, result.adapter.theta)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcore import nn
from qcore.data import Dataset
from qcore.errors import NumericError, ShapeError, UsageError

from conftest import CONV_ARCH, DENSE_ARCH, blobs


def numeric_grads(model, X, y, eps=1e-4):
    out = []
    for _, _, p in model.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = nn.cross_entropy(model, X, y)
            p[idx] = old - eps
            down = nn.cross_entropy(model, X, y)
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def analytic_grads(model, X, y):
    flat = []
    for g in nn.backward_stats(model, X, y):
        if g is not None:
            flat.extend(g)
    return flat


def max_rel_error(a, b):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


class TestBuildModel:
    def test_same_seed_is_bit_identical(self):
        a, b = nn.build_model(DENSE_ARCH, 7), nn.build_model(DENSE_ARCH, 7)
        assert nn.checkpoint_bytes(a) == nn.checkpoint_bytes(b)

    def test_init_bound(self):
        model = nn.build_model(DENSE_ARCH, 7)
        for _, _, p in model.parameters():
            assert np.all(np.abs(p) <= 0.5)

    def test_incomposable_shapes(self):
        arch = {
            "input_shape": [1, 6],
            "layers": [
                {"kind": "conv1d", "in_channels": 1, "out_channels": 2, "kernel_size": 3},
                {"kind": "dense", "in_features": 5, "out_features": 3},
            ],
        }
        with pytest.raises(ShapeError, match="in_features=5"):
            nn.build_model(arch, 0)

    def test_unknown_kind(self):
        with pytest.raises(ShapeError):
            nn.build_model({"input_dim": 2, "layers": [{"kind": "lstm"}]}, 0)


class TestForward:
    def test_zero_weights_uniform(self):
        model = nn.build_model(DENSE_ARCH, 0)
        for _, _, p in model.parameters():
            p[...] = 0
        pred = nn.forward(model, np.ones(4))
        np.testing.assert_allclose(pred.probabilities, [1 / 3] * 3, atol=1e-12)
        assert pred.label == 0

    def test_argmax_forced(self):
        model = nn.build_model(DENSE_ARCH, 0)
        model.layers[0].weight[...] = 0
        model.layers[0].bias[...] = [0, 0, 5]
        assert nn.forward(model, np.zeros(4)).label == 2

    def test_matches_hand_computed(self, rng):
        model = nn.build_model(CONV_ARCH, 3)
        x = rng.standard_normal(6)
        conv, dense = model.layers[0], model.layers[2]
        h = np.zeros((2, 4))
        for o in range(2):
            for t in range(4):
                h[o, t] = sum(conv.weight[o, 0, k] * x[t + k] for k in range(3)) + conv.bias[o]
        h = np.maximum(h, 0).ravel()
        logits = dense.weight @ h + dense.bias
        expect = np.exp(logits - logits.max())
        expect /= expect.sum()
        np.testing.assert_allclose(nn.forward(model, x).probabilities, expect, rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            nn.forward(nn.build_model(DENSE_ARCH, 0), np.ones(5))

    def test_forward_is_pure(self, rng):
        model = nn.build_model(CONV_ARCH, 1)
        before = nn.checkpoint_bytes(model)
        nn.forward(model, rng.standard_normal(6))
        assert nn.checkpoint_bytes(model) == before

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_softmax_is_a_distribution(self, logits):
        p = nn.softmax(np.array([logits]))[0]
        assert np.all(p >= 0)
        assert abs(p.sum() - 1) < 1e-6


class TestGradients:
    @pytest.mark.parametrize("arch", [DENSE_ARCH, CONV_ARCH], ids=["dense", "conv-relu-dense"])
    def test_finite_differences(self, arch, rng):
        model = nn.build_model(arch, 5)
        X = rng.standard_normal((6, model.input_dim))
        y = rng.integers(0, 3, 6)
        assert max_rel_error(analytic_grads(model, X, y), numeric_grads(model, X, y)) < 1e-3

    def test_duplicate_example_mean_reduction(self, rng):
        model = nn.build_model(DENSE_ARCH, 0)
        x, y = rng.standard_normal((1, 4)), np.array([1])
        single = analytic_grads(model, x, y)
        double = analytic_grads(model, np.vstack([x, x]), np.array([1, 1]))
        for a, b in zip(single, double):
            np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_symmetric_bias_gradients_cancel(self):
        model = nn.build_model({"input_dim": 2, "layers": [{"kind": "dense", "in_features": 2, "out_features": 2}]}, 0)
        for _, _, p in model.parameters():
            p[...] = 0
        X = np.array([[1.0, 0.0], [-1.0, 0.0]])
        _, db = nn.backward_stats(model, X, np.array([0, 1]))[0]
        np.testing.assert_allclose(db, 0, atol=1e-15)

    def test_does_not_modify_model(self, rng):
        model = nn.build_model(CONV_ARCH, 2)
        before = nn.checkpoint_bytes(model)
        nn.backward_stats(model, rng.standard_normal((3, 6)), np.array([0, 1, 2]))
        assert nn.checkpoint_bytes(model) == before

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            nn.backward_stats(nn.build_model(DENSE_ARCH, 0), np.zeros((0, 4)), np.zeros(0, dtype=int))


class TestTraining:
    def test_blobs_are_learned(self):
        data = blobs(n=200, seed=3)
        model = nn.build_model({"input_dim": 2, "layers": [{"kind": "dense", "in_features": 2, "out_features": 2}]}, 0)
        cfg = nn.TrainConfig(0.1, 50, 16, 0)
        for _ in range(cfg.epochs):
            nn.train_epoch(model, data, cfg)
        assert nn.accuracy(model, data.features, data.labels) >= 0.95

    def test_zero_learning_rate_is_identity(self):
        data = blobs(n=40, dim=4, classes=3)
        model = nn.build_model(DENSE_ARCH, 0)
        before = [p.tobytes() for _, _, p in model.parameters()]
        pre_loss = nn.cross_entropy(model, data.features, data.labels)
        loss = nn.train_epoch(model, data, nn.TrainConfig(0.0, 1, len(data), 0))
        assert loss == pytest.approx(pre_loss, rel=1e-12)
        assert [p.tobytes() for _, _, p in model.parameters()] == before
        assert model.epoch_count == 1

    def test_single_example_loss_settles(self):
        data = Dataset([0], [[1.0, -2.0, 0.5, 3.0]], [2], 3)
        model = nn.build_model(DENSE_ARCH, 4)
        cfg = nn.TrainConfig(0.05, 1, 1, 0)
        losses = [nn.train_epoch(model, data, cfg) for _ in range(40)]
        assert all(b <= a for a, b in zip(losses[-11:], losses[-10:]))

    def test_determinism(self):
        data = blobs(n=60, dim=6, classes=3, seed=2)
        cfg = nn.TrainConfig(0.05, 3, 8, 11)
        outs = []
        for _ in range(2):
            model = nn.build_model(CONV_ARCH, 9)
            for _ in range(cfg.epochs):
                nn.train_epoch(model, data, cfg)
            outs.append(nn.checkpoint_bytes(model))
        assert outs[0] == outs[1]

    def test_empty_data(self):
        empty = Dataset(np.zeros(0), np.zeros((0, 4)), np.zeros(0), 3)
        with pytest.raises(UsageError):
            nn.train_epoch(nn.build_model(DENSE_ARCH, 0), empty, nn.TrainConfig())

    def test_non_finite_loss(self):
        data = blobs(n=8, dim=4, classes=3)
        data.features[3, 0] = np.inf
        with pytest.raises(NumericError, match="batch 0"):
            nn.train_epoch(nn.build_model(DENSE_ARCH, 0), data, nn.TrainConfig(0.1, 1, 8, 0))

    @pytest.mark.parametrize("kwargs", [{"learning_rate": -1}, {"epochs": 0}, {"batch_size": 0}])
    def test_bad_config(self, kwargs):
        with pytest.raises(UsageError):
            nn.TrainConfig(**kwargs)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = nn.build_model(CONV_ARCH, 3)
        nn.round_to_float32(model)
        nn.save_checkpoint(model, tmp_path / "m.qcfp")
        back = nn.load_checkpoint(tmp_path / "m.qcfp")
        assert nn.checkpoint_bytes(back) == nn.checkpoint_bytes(model)
        for (_, _, a), (_, _, b) in zip(model.parameters(), back.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_header(self):
        raw = nn.checkpoint_bytes(nn.build_model(CONV_ARCH, 0))
        assert raw[:4] == b"QCFP"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope")
        with pytest.raises(UsageError):
            nn.load_checkpoint(tmp_path / "x")


class TestOpCounter:
    def test_phase_sums_equal_total(self, rng):
        counter = nn.ops
        counter.reset()
        model = nn.build_model(CONV_ARCH, 0)
        with counter.phase("a"):
            nn.predict(model, rng.standard_normal((5, 6)))
        with counter.phase("b"):
            nn.backward_stats(model, rng.standard_normal((5, 6)), np.zeros(5, dtype=int))
        snap, total = counter.snapshot(), counter.total()
        assert snap["a"]["grad_calls"] == 0 and snap["b"]["grad_calls"] == 1
        for key in total:
            assert sum(b[key] for b in snap.values()) == total[key]

import numpy as np
import pytest

from qcore import bitflip, nn, quant
from qcore.bitflip import CalibrationConfig, DeltaRecords
from qcore.data import Dataset
from qcore.errors import UsageError

from conftest import CONV_ARCH, DENSE_ARCH, blobs


def calib_data():
    return blobs(n=48, dim=6, classes=3, seed=4)


class TestCodeSteps:
    def test_threshold(self):
        steps = bitflip.code_steps(np.array([0.2, -0.49, 0.5, -0.7, 2.6]), 1.0, 0.5)
        np.testing.assert_array_equal(steps, [0, 0, 1, -1, 3])

    def test_high_threshold_still_moves_one_step(self):
        assert bitflip.code_steps(np.array([0.9]), 1.0, 0.8)[0] == 1


class TestActivationDeltas:
    def test_dense_oracle(self, rng):
        model = nn.build_model(DENSE_ARCH, 0)
        X = rng.standard_normal((5, 4))
        a = X.reshape(5, 1, 4)
        dw, db = bitflip.activation_deltas(model, 0, a)
        mean_in = X.mean(axis=0)
        np.testing.assert_allclose(dw, model.layers[0].weight * mean_in - mean_in)
        np.testing.assert_allclose(db, model.layers[0].bias - 1)


class TestRecording:
    def test_record_count_and_labels(self):
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 0), 8)
        cfg = CalibrationConfig(epochs=3, learning_rate=0.05, seed=1)
        _, recs = bitflip.record_calibration(qm, calib_data(), cfg)
        assert len(recs) == qm.n_params * 3
        assert set(np.unique(recs.delta_p)) <= {-1, 0, 1}

    def test_zero_learning_rate_moves_nothing(self):
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 0), 4)
        out, recs = bitflip.record_calibration(qm, calib_data(), CalibrationConfig(epochs=2, learning_rate=0.0))
        assert np.all(recs.delta_p == 0)
        for a, b in zip(qm.tensors, out.tensors):
            np.testing.assert_array_equal(a.codes, b.codes)

    def test_bp_calibration_reduces_loss(self):
        data = calib_data()
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 2), 8)
        out = bitflip.bp_calibrate(qm, data, CalibrationConfig(epochs=20, learning_rate=0.1))
        before = nn.cross_entropy(quant.dequantize(qm), data.features, data.labels)
        after = nn.cross_entropy(quant.dequantize(out), data.features, data.labels)
        assert after < before

    def test_text_export(self, tmp_path):
        qm = quant.quantize_model(nn.build_model(DENSE_ARCH, 0), 4)
        data = blobs(n=10, dim=4, classes=3)
        _, recs = bitflip.record_calibration(qm, data, CalibrationConfig(epochs=1))
        recs.save(tmp_path / "d.tsv")
        lines = (tmp_path / "d.tsv").read_text().splitlines()
        assert len(lines) == len(recs) + 1 and lines[0].startswith("layer\t")


def sign_records(n=3000, seed=0):
    rng = np.random.default_rng(seed)
    da = rng.standard_normal(n)
    dp = np.where(da > 0.4, 1, np.where(da < -0.4, -1, 0))
    return DeltaRecords(np.zeros(n, int), np.arange(n), np.zeros(n, int), da, dp)


class TestBitFlipNet:
    def test_learns_a_sign_rule(self):
        recs = sign_records()
        bf = bitflip.train_bitflip(recs, 8, nn.TrainConfig(0.1, 40, 64, 0), 0)
        held = sign_records(seed=1)
        assert np.mean(bf.predict(held.delta_a) == held.delta_p) >= 0.9

    def test_single_label_gives_constant_net(self):
        recs = sign_records()
        recs.delta_p[:] = 0
        bf = bitflip.train_bitflip(recs, 4, nn.TrainConfig(), 0)
        assert bf.degenerate
        assert np.all(bf.predict(np.linspace(-5, 5, 50)) == 0)

    @pytest.mark.parametrize("step", [-1, 0, 1])
    def test_constant_net(self, step):
        assert np.all(bitflip.constant_bitflip(4, step).predict(np.linspace(-9, 9, 31)) == step)

    def test_checkpoint_roundtrip(self, tmp_path):
        bf = bitflip.train_bitflip(sign_records(), 4, nn.TrainConfig(0.1, 5, 64, 0), 0)
        bitflip.save_bitflip(bf, tmp_path / "b.qcbf")
        back = bitflip.load_bitflip(tmp_path / "b.qcbf")
        x = np.linspace(-3, 3, 101)
        np.testing.assert_array_equal(back.predict(x), bf.predict(x))
        assert back.net.tag == 4

    def test_tag_mismatch_rejected(self, tmp_path):
        bf = bitflip.constant_bitflip(4)
        bf.net.tag = 2
        bitflip.save_bitflip(bf, tmp_path / "b.qcbf")
        with pytest.raises(UsageError, match="tag"):
            bitflip.load_bitflip(tmp_path / "b.qcbf")


class TestBfCalibration:
    def test_zero_net_is_identity(self):
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 0), 4)
        data = calib_data()
        out = bitflip.bf_calibrate(qm, bitflip.constant_bitflip(4, 0), data, None, CalibrationConfig(epochs=3))
        assert quant.quant_bytes(out) == quant.quant_bytes(qm)

    @pytest.mark.parametrize("step", [-1, 1])
    def test_step_bound_and_range(self, step):
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 0), 2)
        bf = bitflip.constant_bitflip(2, step)
        cur = qm
        lo, hi = quant.code_range(2)
        for _ in range(5):
            nxt = bitflip.bf_epoch(cur, bf, calib_data().features)
            for a, b in zip(cur.tensors, nxt.tensors):
                assert np.max(np.abs(a.codes.astype(int) - b.codes)) <= 1
                assert b.codes.min() >= lo and b.codes.max() <= hi
            cur = nxt

    def test_no_gradient_calls(self):
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 0), 8)
        bf = bitflip.train_bitflip(sign_records(), 8, nn.TrainConfig(0.1, 3, 64, 0), 0)
        nn.ops.reset()
        with nn.ops.phase("bf"):
            bitflip.bf_calibrate(qm, bf, calib_data(), None, CalibrationConfig(epochs=2))
        assert nn.ops.snapshot()["bf"]["grad_calls"] == 0

    def test_bit_width_mismatch(self):
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 0), 8)
        with pytest.raises(UsageError):
            bitflip.bf_epoch(qm, bitflip.constant_bitflip(4), calib_data().features)

    def test_union_of_core_and_batch(self):
        core = calib_data()
        batch = Dataset.concat([core.subset([0, 1]), blobs(n=5, dim=6, classes=3, id_offset=500)])
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 0), 4)
        out = bitflip.bf_calibrate(qm, bitflip.constant_bitflip(4, 1), core, batch, CalibrationConfig(epochs=1))
        assert out.bit_width == 4

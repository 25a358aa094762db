import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qcore import nn, quant
from qcore.errors import UsageError

from conftest import CONV_ARCH, DENSE_ARCH, blobs


def bucket_grid():
    """A 3-bit tensor over [-30, 40]: bucket width 10, centres -30, -20, ..., 40."""
    return np.array([-30.0, 40.0])


class TestBucketFixture:
    def test_value_maps_to_twenty(self):
        base = quant.quantize_tensor(bucket_grid(), 3)
        assert base.scale == pytest.approx(10.0)
        code = quant.grid_codes(np.array([17.831]), base.scale, base.zero_point, 3)[0]
        value = code * base.scale + base.zero_point
        assert value == pytest.approx(20.0)
        # unsigned bucket label: offset the signed code by 2^(j-1)
        assert format(int(code) + 4, "03b") == "101"

    @pytest.mark.parametrize("v", [15.0, 24.999])
    def test_bucket_edges(self, v):
        base = quant.quantize_tensor(bucket_grid(), 3)
        code = quant.grid_codes(np.array([v]), base.scale, base.zero_point, 3)[0]
        assert code * base.scale + base.zero_point == pytest.approx(20.0)


class TestQuantizeTensor:
    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_reconstruction_error(self, bits, rng):
        v = rng.uniform(-3, 5, 1000)
        qt = quant.quantize_tensor(v, bits)
        assert np.max(np.abs(qt.values() - v)) <= qt.scale / 2 + 1e-12

    def test_constant_tensor(self):
        qt = quant.quantize_tensor(np.full(7, 0.37), 4)
        assert np.all(qt.codes == qt.codes[0])
        np.testing.assert_array_equal(qt.values(), np.full(7, 0.37))

    @pytest.mark.parametrize("bits", [1, 9, 2.5])
    def test_bad_bits(self, bits):
        with pytest.raises(UsageError):
            quant.quantize_tensor(np.arange(3.0), bits)

    def test_rounding_half_away_from_zero(self):
        np.testing.assert_array_equal(quant.round_half_away(np.array([0.5, -0.5, 1.5, -2.5])), [1, -1, 2, -3])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-100, 100)), st.sampled_from([2, 3, 4, 8]))
    def test_codes_in_range_and_monotone(self, v, bits):
        qt = quant.quantize_tensor(v, bits)
        lo, hi = quant.code_range(bits)
        assert qt.codes.min() >= lo and qt.codes.max() <= hi
        order = np.argsort(v, kind="stable")
        assert np.all(np.diff(qt.codes[order].astype(int)) >= 0)
        assert np.max(np.abs(qt.values() - v)) <= qt.scale / 2 * (1 + 1e-9) + 1e-12


class TestQuantModel:
    def test_dequantize_identity_scale(self):
        qm = quant.quantize_model(nn.build_model(DENSE_ARCH, 0), 2)
        qm.tensors[0] = quant.QTensor(np.array([[-2, -1, 0, 1]] * 3, dtype=np.int8), 1.0, 0.0)
        w = quant.dequantize(qm).layers[0].weight
        np.testing.assert_array_equal(w[0], [-2, -1, 0, 1])

    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_requantize_roundtrip(self, bits):
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 1), bits)
        again = quant.quantize_model(quant.dequantize(qm), bits)
        for a, b in zip(qm.tensors, again.tensors):
            np.testing.assert_array_equal(a.codes, b.codes)

    def test_logit_error_bound(self, rng):
        model = nn.build_model(DENSE_ARCH, 2)
        qm = quant.quantize_model(model, 4)
        deq = quant.dequantize(qm)
        x = rng.standard_normal(4)
        fp, _ = nn.forward_trace(model, x)
        q, _ = nn.forward_trace(deq, x)
        dw = np.abs(deq.layers[0].weight - model.layers[0].weight)
        db = np.abs(deq.layers[0].bias - model.layers[0].bias)
        bound = dw @ np.abs(x) + db
        assert np.all(np.abs(fp - q)[0] <= bound + 1e-12)

    def test_forward_quant_is_reference(self, rng):
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 3), 4)
        x = rng.standard_normal(6)
        a, b = quant.forward_quant(qm, x), nn.forward(quant.dequantize(qm), x)
        np.testing.assert_array_equal(a.probabilities, b.probabilities)

    def test_bit_width_trend(self):
        data = blobs(n=400, dim=4, classes=3, seed=5, sep=3.0)
        model = nn.build_model(DENSE_ARCH, 0)
        cfg = nn.TrainConfig(0.1, 30, 16, 0)
        for _ in range(cfg.epochs):
            nn.train_epoch(model, data, cfg)
        fp = nn.accuracy(model, data.features, data.labels)
        a8 = quant.accuracy_quant(quant.quantize_model(model, 8), data.features, data.labels)
        a2 = quant.accuracy_quant(quant.quantize_model(model, 2), data.features, data.labels)
        assert abs(a8 - fp) <= 0.05
        assert a2 <= a8 + 0.05

    def test_checkpoint_roundtrip(self, tmp_path):
        qm = quant.quantize_model(nn.build_model(CONV_ARCH, 3), 4)
        qm.tag = 4
        quant.save_quant(qm, tmp_path / "q.qcqm")
        back = quant.load_quant(tmp_path / "q.qcqm")
        assert quant.quant_bytes(back) == quant.quant_bytes(qm)
        assert back.tag == 4 and back.bit_width == 4

"""Bit-flipping network: learn code steps from activation deltas, then calibrate without gradients.

Recording runs ordinary back-propagation calibration of a quantized model.
For every weight scalar and epoch it stores the activation delta
``dA = w * act - act`` (``act`` being the weight's input activation averaged
over the calibration set; 1 for biases) and the clipped code step
``dP in {-1, 0, 1}`` that back-propagation produced. A small conv + dense
classifier learns ``dA -> dP`` and is itself quantized to the target bit
width. On the device, calibration then needs forward passes only.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from qcore import nn, quant
from qcore._io import atomic_write_bytes, atomic_write_text
from qcore.data import Dataset
from qcore.errors import NumericError, UsageError

log = logging.getLogger(__name__)

BF_HIDDEN = 8


@dataclass
class CalibrationConfig:
    epochs: int = 5
    flip_threshold: float = 0.5
    learning_rate: float = 0.01
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise UsageError(f"calibration epochs must be >= 1, got {self.epochs}")
        if not self.flip_threshold > 0:
            raise UsageError(f"flip threshold must be > 0, got {self.flip_threshold}")
        if not self.learning_rate >= 0:
            raise UsageError(f"learning rate must be >= 0, got {self.learning_rate}")


class DeltaRecord(NamedTuple):
    tensor: int    # position in FpModel.parameters()
    index: int     # flat index inside the tensor
    epoch: int
    delta_a: float
    delta_p: int


@dataclass
class DeltaRecords:
    """Column store of recorded (dA, dP) pairs."""

    tensor: np.ndarray
    index: np.ndarray
    epoch: np.ndarray
    delta_a: np.ndarray
    delta_p: np.ndarray
    layer_of_tensor: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.delta_a)

    def __iter__(self) -> Iterator[DeltaRecord]:
        for row in zip(self.tensor, self.index, self.epoch, self.delta_a, self.delta_p):
            yield DeltaRecord(int(row[0]), int(row[1]), int(row[2]), float(row[3]), int(row[4]))

    @classmethod
    def from_records(cls, records) -> "DeltaRecords":
        records = list(records)
        cols = list(zip(*records)) if records else [[]] * 5
        return cls(
            np.asarray(cols[0], dtype=np.int64), np.asarray(cols[1], dtype=np.int64),
            np.asarray(cols[2], dtype=np.int64), np.asarray(cols[3], dtype=np.float64),
            np.asarray(cols[4], dtype=np.int64),
        )

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("layer\ttensor\tindex\tepoch\tdelta_a\tdelta_p\n")
        for r in self:
            layer = self.layer_of_tensor[r.tensor] if self.layer_of_tensor else -1
            buf.write(f"{layer}\t{r.tensor}\t{r.index}\t{r.epoch}\t{r.delta_a!r}\t{r.delta_p}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write_text(path, self.to_text())


# ---------------------------------------------------------------------------
# activation deltas
# ---------------------------------------------------------------------------


def input_activations(layer: nn.Layer, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean input activation seen by every weight and bias scalar of ``layer``."""
    if layer.kind == "dense":
        mean_in = a.reshape(a.shape[0], -1).mean(axis=0)
        act_w = np.broadcast_to(mean_in, layer.weight.shape)
    else:
        k = layer.weight.shape[2]
        windows = np.lib.stride_tricks.sliding_window_view(a, k, axis=2)  # (n, c, l_out, k)
        mean_in = windows.mean(axis=(0, 2))  # (c, k)
        act_w = np.broadcast_to(mean_in, layer.weight.shape)
    return act_w, np.ones_like(layer.bias)


def activation_deltas(model: nn.FpModel, layer_index: int, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    layer = model.layers[layer_index]
    act_w, act_b = input_activations(layer, a)
    if not (np.all(np.isfinite(act_w))):
        raise NumericError(f"non-finite activation entering layer {layer_index}")
    return layer.weight * act_w - act_w, layer.bias * act_b - act_b


def _all_deltas(model: nn.FpModel, X) -> list[np.ndarray]:
    _, inputs = nn.forward_trace(model, X)
    out = []
    for i, layer in enumerate(model.layers):
        if layer.has_params:
            out.extend(activation_deltas(model, i, inputs[i]))
    return out


# ---------------------------------------------------------------------------
# back-propagation calibration
# ---------------------------------------------------------------------------


def code_steps(delta: np.ndarray, scale: float, threshold: float) -> np.ndarray:
    """Integer code steps for a real-valued update: zero below ``threshold`` code units, else at least one."""
    m = np.abs(delta) / scale
    steps = np.where(m < threshold, 0.0, np.maximum(1.0, quant.round_half_away(m)))
    return (np.sign(delta) * steps).astype(np.int64)


class BpCalibrator:
    """Back-propagation calibration of a quantized model against a full-precision shadow.

    Gradients are taken at the dequantized weights and applied to a float
    shadow copy that starts at those weights. After every epoch each code
    moves by :func:`code_steps` of the shadow's distance from the current
    grid value, so small updates accumulate until they cross a threshold.
    """

    def __init__(self, qm: quant.QuantModel, cfg: CalibrationConfig):
        self.qm = qm.copy()
        self.cfg = cfg
        self.shadow = quant.dequantize(self.qm)
        self.epoch = 0

    def step(self, data: Dataset) -> list[np.ndarray]:
        """Run one epoch over ``data``; return the code change of every tensor."""
        cfg = self.cfg
        current = quant.dequantize(self.qm)
        n = len(data)
        if n == 0:
            raise UsageError("cannot calibrate on an empty dataset")
        rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFF, 0xB9, self.epoch])
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            grads = nn.backward_stats(current, data.features[idx], data.labels[idx])
            nn.sgd_step(self.shadow, grads, cfg.learning_rate)
        lo, hi = quant.code_range(self.qm.bit_width)
        changes = []
        for t, ((_, _, w_q), (_, _, w_s)) in enumerate(zip(current.parameters(), self.shadow.parameters())):
            qt = self.qm.tensors[t]
            steps = code_steps(w_s - w_q, qt.scale, cfg.flip_threshold)
            new_codes = np.clip(qt.codes.astype(np.int64) + steps, lo, hi)
            changes.append(new_codes - qt.codes)
            qt.codes = new_codes.astype(np.int8)
        self.epoch += 1
        return changes


def bp_calibrate(qm: quant.QuantModel, data: Dataset, cfg: CalibrationConfig, epochs: int | None = None
                 ) -> quant.QuantModel:
    cal = BpCalibrator(qm, cfg)
    for _ in range(cfg.epochs if epochs is None else epochs):
        cal.step(data)
    return cal.qm


def record_calibration(qm: quant.QuantModel, data: Dataset, cfg: CalibrationConfig, epochs: int | None = None
                       ) -> tuple[quant.QuantModel, DeltaRecords]:
    """Calibrate ``qm`` on ``data`` by back-propagation, recording (dA, dP) per weight and epoch."""
    cal = BpCalibrator(qm, cfg)
    tensor_layers = [i for i, _, _ in cal.shadow.parameters()]
    cols: dict[str, list[np.ndarray]] = {k: [] for k in ("tensor", "index", "epoch", "delta_a", "delta_p")}
    for s in range(cfg.epochs if epochs is None else epochs):
        deltas = _all_deltas(quant.dequantize(cal.qm), data.features)
        changes = cal.step(data)
        for t, (da, dc) in enumerate(zip(deltas, changes)):
            cols["tensor"].append(np.full(da.size, t))
            cols["index"].append(np.arange(da.size))
            cols["epoch"].append(np.full(da.size, s))
            cols["delta_a"].append(da.ravel())
            cols["delta_p"].append(np.clip(dc.ravel(), -1, 1))
    recs = DeltaRecords(*(np.concatenate(cols[k]) for k in cols), layer_of_tensor=tensor_layers)
    return cal.qm, recs


# ---------------------------------------------------------------------------
# the bit-flipping network
# ---------------------------------------------------------------------------


BF_ARCH = {
    "input_shape": [1, 1],
    "layers": [
        {"kind": "conv1d", "in_channels": 1, "out_channels": BF_HIDDEN, "kernel_size": 1},
        {"kind": "relu"},
        {"kind": "dense", "in_features": BF_HIDDEN, "out_features": 3},
    ],
}


@dataclass
class BitFlipNet:
    """Quantized 3-class network mapping a standardized dA to a code step in {-1, 0, 1}."""

    net: quant.QuantModel
    bit_width: int
    input_shift: float = 0.0
    input_scale: float = 1.0
    train_accuracy: float = float("nan")
    degenerate: bool = False

    def __post_init__(self) -> None:
        self._model = quant.dequantize(self.net)
        # tally of emitted steps, indexed by step + 1, plus anything outside {-1, 0, 1}
        self.emitted = np.zeros(3, dtype=np.int64)
        self.invalid = 0

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def predict(self, delta_a) -> np.ndarray:
        delta_a = np.asarray(delta_a, dtype=np.float64).ravel()
        if delta_a.size == 0:
            return np.zeros(0, dtype=np.int64)
        z = ((delta_a - self.input_shift) / self.input_scale)[:, None]
        steps = nn.predict(self._model, z) - 1
        valid = (steps >= -1) & (steps <= 1)
        self.invalid += int(np.count_nonzero(~valid))
        self.emitted += np.bincount(steps[valid] + 1, minlength=3)
        return steps


def constant_bitflip(bits: int, step: int = 0) -> BitFlipNet:
    """A net that emits ``step`` for every input."""
    model = nn.build_model(BF_ARCH, 0)
    for _, _, p in model.parameters():
        p[...] = 0.0
    model.layers[-1].bias[:] = -1.0
    model.layers[-1].bias[step + 1] = 1.0
    net = quant.quantize_model(model, bits)
    net.tag = bits
    return BitFlipNet(net, bits, degenerate=True)


def train_bitflip(records: DeltaRecords, bits: int, cfg: nn.TrainConfig, seed: int) -> BitFlipNet:
    """Fit the dA -> dP classifier with class-frequency weights, then quantize it to ``bits``."""
    bits = quant.check_bits(bits)
    if len(records) == 0:
        raise UsageError("no delta records to train on")
    labels = records.delta_p.astype(np.int64) + 1
    present = np.unique(labels)
    if len(present) < 2:
        log.warning("degenerate bit-flip training: every record has dP=%d", present[0] - 1)
        bf = constant_bitflip(bits, int(present[0]) - 1)
        bf.train_accuracy = 1.0
        return bf

    x = records.delta_a
    shift = float(np.median(x))
    scale = float(np.std(x)) or 1.0
    z = ((x - shift) / scale)[:, None]
    freq = np.bincount(labels, minlength=3).astype(np.float64)
    weight_of_class = np.where(freq > 0, len(labels) / (len(present) * np.maximum(freq, 1)), 0.0)
    sample_weight = weight_of_class[labels]

    model = nn.build_model(BF_ARCH, seed)
    data = Dataset(np.arange(len(labels)), z, labels, 3, domain="bitflip")
    for _ in range(cfg.epochs):
        nn.train_epoch(model, data, cfg, sample_weight=sample_weight)
    net = quant.quantize_model(model, bits)
    net.tag = bits
    bf = BitFlipNet(net, bits, shift, scale)
    pred = bf.predict(x) + 1
    bf.train_accuracy = float(np.sum(sample_weight * (pred == labels)) / sample_weight.sum())
    return bf


# ---------------------------------------------------------------------------
# gradient-free calibration
# ---------------------------------------------------------------------------


def bf_epoch(qm: quant.QuantModel, bf: BitFlipNet, X) -> quant.QuantModel:
    """One calibration epoch driven by the bit-flipping network.

    Layers are visited in order; each layer's input comes from the already
    updated layers before it. Every code moves by at most one step.
    """
    if bf.bit_width != qm.bit_width:
        raise UsageError(f"bit-flip net is {bf.bit_width}-bit but the model is {qm.bit_width}-bit")
    out = qm.copy()
    model = quant.dequantize(out)
    lo, hi = quant.code_range(qm.bit_width)
    a = nn._as_batch(model, X)
    nn.ops.add_forward_call()
    t = 0
    for i, layer in enumerate(model.layers):
        if layer.has_params:
            da_w, da_b = activation_deltas(model, i, a)
            for name, da in (("weight", da_w), ("bias", da_b)):
                qt = out.tensors[t]
                steps = bf.predict(da).reshape(qt.codes.shape)
                qt.codes = np.clip(qt.codes.astype(np.int64) + steps, lo, hi).astype(np.int8)
                setattr(layer, name, qt.values())
                t += 1
        a = nn._layer_forward(layer, a)
    return out


def bf_calibrate(qm: quant.QuantModel, bf: BitFlipNet, core, batch, cfg: CalibrationConfig,
                 epochs: int | None = None, on_epoch=None) -> quant.QuantModel:
    """Calibrate on ``core`` plus ``batch`` using forward passes only.

    ``on_epoch(epoch, before, after)`` is called after every epoch.
    """
    parts = [d for d in (getattr(core, "examples", core), getattr(batch, "examples", batch)) if d is not None]
    X = Dataset.union(parts).features
    for e in range(cfg.epochs if epochs is None else epochs):
        new = bf_epoch(qm, bf, X)
        if on_epoch is not None:
            on_epoch(e, qm, new)
        qm = new
    return qm


def save_bitflip(bf: BitFlipNet, path) -> None:
    """QCQM body (tagged with the target bit width) followed by the input standardization."""
    atomic_write_bytes(path, quant.quant_bytes(bf.net) + struct.pack("<dd", bf.input_shift, bf.input_scale))


def load_bitflip(path) -> BitFlipNet:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"bit-flip checkpoint not found: {path}")
    raw = path.read_bytes()
    net, pos = quant.parse_quant(raw, str(path))
    shift, scale = struct.unpack_from("<dd", raw, pos)
    if net.tag != net.bit_width:
        raise UsageError(f"{path}: bit-flip tag {net.tag} does not match bit width {net.bit_width}")
    return BitFlipNet(net, net.bit_width, shift, scale)

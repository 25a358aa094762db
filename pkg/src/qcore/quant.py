"""Uniform affine per-tensor quantization of model parameters.

A tensor with range [lo, hi] at ``j`` bits gets ``scale = (hi - lo) / (2**j - 1)``
and signed codes in ``[-2**(j-1), 2**(j-1) - 1]``. The zero point is chosen
so that the lowest code reconstructs ``lo`` exactly:
``zero_point = lo + 2**(j-1) * scale`` and ``value = code * scale + zero_point``.

Inference is simulated: codes are dequantized to float64 and run through
the float engine.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qcore import nn
from qcore._io import atomic_write_bytes
from qcore.errors import ShapeError, UsageError

MIN_SCALE = 1e-12
MIN_BITS, MAX_BITS = 2, 8


def code_range(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def check_bits(bits: int) -> int:
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise UsageError(f"bit width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class QTensor:
    codes: np.ndarray
    scale: float
    zero_point: float

    def values(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale + self.zero_point


def grid_codes(values: np.ndarray, scale: float, zero_point: float, bits: int) -> np.ndarray:
    """Codes for ``values`` on an existing grid, clamped to the bit range."""
    lo, hi = code_range(bits)
    codes = round_half_away((np.asarray(values, dtype=np.float64) - zero_point) / scale)
    return np.clip(codes, lo, hi).astype(np.int8)


def quantize_tensor(values: np.ndarray, bits: int) -> QTensor:
    bits = check_bits(bits)
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        # degenerate range: every value reconstructs exactly
        return QTensor(np.zeros(values.shape, dtype=np.int8), MIN_SCALE, lo)
    scale = max((hi - lo) / (2**bits - 1), MIN_SCALE)
    zero_point = lo + 2 ** (bits - 1) * scale
    return QTensor(grid_codes(values, scale, zero_point, bits), scale, zero_point)


@dataclass
class QuantModel:
    """Integer codes plus per-tensor scale/zero point for every parameter tensor.

    ``tensors`` follows the order of ``FpModel.parameters()``. ``tag`` links an
    auxiliary network to the bit width of the model it serves (0 = none).
    """

    bit_width: int
    arch: dict
    tensors: list[QTensor]
    tag: int = 0
    meta: dict = field(default_factory=dict)

    def copy(self) -> "QuantModel":
        return QuantModel(
            self.bit_width,
            self.arch,
            [QTensor(t.codes.copy(), t.scale, t.zero_point) for t in self.tensors],
            self.tag,
            dict(self.meta),
        )

    @property
    def n_params(self) -> int:
        return sum(t.codes.size for t in self.tensors)


def quantize_model(model: nn.FpModel, bits: int) -> QuantModel:
    bits = check_bits(bits)
    tensors = [quantize_tensor(p, bits) for _, _, p in model.parameters()]
    return QuantModel(bits, model.arch, tensors)


def dequantize(qm: QuantModel) -> nn.FpModel:
    model = nn.build_model(qm.arch, 0)
    params = model.parameters()
    if len(params) != len(qm.tensors):
        raise ShapeError(f"quantized model has {len(qm.tensors)} tensors, architecture needs {len(params)}")
    for (i, name, p), qt in zip(params, qm.tensors):
        if qt.codes.shape != p.shape:
            raise ShapeError(f"layer {i} {name}: code shape {qt.codes.shape} != {p.shape}")
        setattr(model.layers[i], name, qt.values())
    return model


def forward_quant(qm: QuantModel, x) -> nn.Prediction:
    return nn.forward(dequantize(qm), x)


def predict_quant(qm: QuantModel, X) -> np.ndarray:
    return nn.predict(dequantize(qm), X)


def accuracy_quant(qm: QuantModel, X, y) -> float:
    return nn.accuracy(dequantize(qm), X, y)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

QM_MAGIC = b"QCQM"
QM_VERSION = 1


def quant_bytes(qm: QuantModel) -> bytes:
    arch = json.dumps(qm.arch, sort_keys=True).encode("utf-8")
    out = [QM_MAGIC, struct.pack("<HBB", QM_VERSION, qm.bit_width, qm.tag)]
    out.append(struct.pack("<I", len(arch)) + arch)
    out.append(struct.pack("<I", len(qm.tensors)))
    for t in qm.tensors:
        out.append(struct.pack("<B", t.codes.ndim) + struct.pack(f"<{t.codes.ndim}I", *t.codes.shape))
        out.append(struct.pack("<dd", t.scale, t.zero_point))
        out.append(np.ascontiguousarray(t.codes, dtype=np.int8).tobytes())
    return b"".join(out)


def save_quant(qm: QuantModel, path) -> None:
    atomic_write_bytes(path, quant_bytes(qm))


def parse_quant(buf: bytes | memoryview, source: str = "<bytes>") -> tuple[QuantModel, int]:
    """Decode a QCQM blob; returns the model and the offset just past it."""
    buf = memoryview(buf)
    if bytes(buf[:4]) != QM_MAGIC:
        raise UsageError(f"{source}: not a QCQM checkpoint")
    version, bits, tag = struct.unpack_from("<HBB", buf, 4)
    if version != QM_VERSION:
        raise UsageError(f"{source}: unsupported version {version}")
    (arch_len,) = struct.unpack_from("<I", buf, 8)
    arch = json.loads(bytes(buf[12:12 + arch_len]).decode("utf-8"))
    pos = 12 + arch_len
    (n_tensors,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = []
    for _ in range(n_tensors):
        (ndim,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
        pos += 1 + 4 * ndim
        scale, zero_point = struct.unpack_from("<dd", buf, pos)
        pos += 16
        count = int(np.prod(shape))
        codes = np.frombuffer(buf, dtype=np.int8, count=count, offset=pos).reshape(shape).copy()
        pos += count
        tensors.append(QTensor(codes, scale, zero_point))
    return QuantModel(bits, arch, tensors, tag), pos


def load_quant(path) -> QuantModel:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"quantized checkpoint not found: {path}")
    qm, _ = parse_quant(path.read_bytes(), str(path))
    return qm

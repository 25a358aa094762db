"""Minimal feedforward classifier: 1-D convolution, dense and ReLU layers.

Models are plain containers of numpy arrays. All arithmetic runs in float64;
checkpoints store parameters as little-endian float32.

The architecture descriptor is a dict (usually loaded from JSON)::

    {
        "input_shape": [1, 16],
        "layers": [
            {"kind": "conv1d", "in_channels": 1, "out_channels": 4, "kernel_size": 3},
            {"kind": "relu"},
            {"kind": "dense", "in_features": 56, "out_features": 4},
        ],
    }

The final layer's output width is the number of classes; a softmax head is
implied.
"""

from __future__ import annotations

import copy
import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from qcore._io import atomic_write_bytes
from qcore.errors import NumericError, ShapeError, UsageError

LAYER_KINDS = ("conv1d", "dense", "relu")
PARAM_KINDS = ("conv1d", "dense")

# ---------------------------------------------------------------------------
# operation counters
# ---------------------------------------------------------------------------


class OpCounter:
    """Multiply-accumulate and gradient-call counters, bucketed by phase.

    Every MAC executed by the engine is charged to the active phase. The
    grand total is always the sum of the per-phase buckets.
    """

    def __init__(self) -> None:
        self._phase = "other"
        self.phases: dict[str, dict[str, int]] = {}

    def _bucket(self) -> dict[str, int]:
        return self.phases.setdefault(self._phase, {"macs": 0, "grad_calls": 0, "forward_calls": 0})

    def add_macs(self, n: int) -> None:
        self._bucket()["macs"] += int(n)

    def add_grad_call(self) -> None:
        self._bucket()["grad_calls"] += 1

    def add_forward_call(self) -> None:
        self._bucket()["forward_calls"] += 1

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        previous = self._phase
        self._phase = name
        try:
            yield
        finally:
            self._phase = previous

    def reset(self) -> None:
        self.phases = {}

    def snapshot(self) -> dict[str, dict[str, int]]:
        return {k: dict(v) for k, v in self.phases.items()}

    def total(self) -> dict[str, int]:
        out = {"macs": 0, "grad_calls": 0, "forward_calls": 0}
        for bucket in self.phases.values():
            for key, val in bucket.items():
                out[key] += val
        return out


ops = OpCounter()


# ---------------------------------------------------------------------------
# model containers
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        # A zero learning rate is accepted: it is the identity update.
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise UsageError(f"learning rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class Prediction:
    probabilities: np.ndarray
    label: int


@dataclass
class FpModel:
    arch: dict
    layers: list[Layer]
    seed: int
    epoch_count: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def num_classes(self) -> int:
        return int(self.layers[-1].out_shape[0])

    def parameters(self) -> list[tuple[int, str, np.ndarray]]:
        """(layer index, "weight"|"bias", array) for every parameter tensor, in order."""
        out = []
        for i, layer in enumerate(self.layers):
            if layer.has_params:
                out.append((i, "weight", layer.weight))
                out.append((i, "bias", layer.bias))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def copy(self) -> "FpModel":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def normalize_arch(arch: dict) -> dict:
    """Return a canonical copy of an architecture descriptor."""
    if "input_shape" in arch:
        input_shape = [int(v) for v in arch["input_shape"]]
    elif "input_dim" in arch:
        input_shape = [1, int(arch["input_dim"])]
    else:
        raise ShapeError("architecture needs 'input_shape' or 'input_dim'")
    layers = []
    for spec in arch.get("layers", []):
        kind = spec.get("kind")
        if kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
        layers.append({k: (v if k == "kind" else int(v)) for k, v in spec.items()})
    if not layers:
        raise ShapeError("architecture has no layers")
    return {"input_shape": input_shape, "layers": layers}


def _infer_shapes(arch: dict) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    shape: tuple[int, ...] = tuple(arch["input_shape"])
    if len(shape) not in (1, 2) or min(shape) < 1:
        raise ShapeError(f"input shape must be (length,) or (channels, length), got {shape}")
    if len(shape) == 1:
        shape = (1, shape[0])
    out = []
    for i, spec in enumerate(arch["layers"]):
        kind = spec["kind"]
        if kind == "conv1d":
            if len(shape) != 2:
                raise ShapeError(f"layer {i} (conv1d) needs a (channels, length) input, got {shape}")
            c_in, length = shape
            if spec["in_channels"] != c_in:
                raise ShapeError(
                    f"layer {i} (conv1d) expects {spec['in_channels']} input channels, "
                    f"previous layer emits {c_in}"
                )
            k = spec["kernel_size"]
            if not 1 <= k <= length:
                raise ShapeError(f"layer {i} (conv1d) kernel {k} does not fit input length {length}")
            new = (spec["out_channels"], length - k + 1)
        elif kind == "dense":
            width = int(np.prod(shape))
            if spec["in_features"] != width:
                raise ShapeError(
                    f"layer {i} (dense) expects in_features={spec['in_features']}, "
                    f"previous layer emits {width} (shape {shape})"
                )
            new = (spec["out_features"],)
        else:
            new = shape
        out.append((shape, new))
        shape = new
    if len(shape) != 1:
        raise ShapeError(f"final layer must emit a flat class-score vector, got shape {shape}")
    return out


def build_model(arch: dict, seed: int) -> FpModel:
    """Build a model with weights drawn uniformly from +-1/sqrt(fan_in)."""
    arch = normalize_arch(arch)
    shapes = _infer_shapes(arch)
    rng = np.random.default_rng(seed)
    layers = []
    for spec, (in_shape, out_shape) in zip(arch["layers"], shapes):
        kind = spec["kind"]
        layer = Layer(kind, in_shape, out_shape)
        if kind == "conv1d":
            w_shape = (spec["out_channels"], spec["in_channels"], spec["kernel_size"])
            fan_in = spec["in_channels"] * spec["kernel_size"]
        elif kind == "dense":
            w_shape = (spec["out_features"], spec["in_features"])
            fan_in = spec["in_features"]
        if layer.has_params:
            bound = 1.0 / np.sqrt(fan_in)
            layer.weight = rng.uniform(-bound, bound, size=w_shape)
            layer.bias = rng.uniform(-bound, bound, size=w_shape[0])
        layers.append(layer)
    return FpModel(arch=arch, layers=layers, seed=int(seed))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _as_batch(model: FpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"model expects inputs of width {model.input_dim}, got array of shape {X.shape}")
    return X.reshape((X.shape[0],) + model.input_shape)


def _layer_forward(layer: Layer, a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    if layer.kind == "dense":
        flat = a.reshape(n, -1)
        ops.add_macs(n * layer.weight.size)
        return flat @ layer.weight.T + layer.bias
    if layer.kind == "conv1d":
        k = layer.weight.shape[2]
        windows = np.lib.stride_tricks.sliding_window_view(a, k, axis=2)  # (n, c, l_out, k)
        ops.add_macs(n * layer.out_shape[1] * layer.weight.size)
        return np.einsum("nclk,ock->nol", windows, layer.weight) + layer.bias[None, :, None]
    return np.maximum(a, 0.0)


def forward_trace(model: FpModel, X) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run a batch forward; return logits and the input to every layer."""
    a = _as_batch(model, X)
    ops.add_forward_call()
    inputs = []
    for layer in model.layers:
        inputs.append(a)
        a = _layer_forward(layer, a)
    return a, inputs


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: FpModel, X) -> np.ndarray:
    logits, _ = forward_trace(model, X)
    return softmax(logits)


def predict(model: FpModel, X) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index.
    return np.argmax(predict_proba(model, X), axis=1)


def forward(model: FpModel, x) -> Prediction:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"forward takes a single example, got shape {x.shape}")
    probs = predict_proba(model, x)[0]
    return Prediction(probabilities=probs, label=int(np.argmax(probs)))


def accuracy(model: FpModel, X, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise UsageError("cannot score an empty set")
    return float(np.mean(predict(model, X) == y))


def _check_labels(model: FpModel, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= model.num_classes):
        raise UsageError(f"labels must lie in [0, {model.num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def cross_entropy(model: FpModel, X, y, sample_weight=None) -> float:
    """Mean (optionally weighted) cross-entropy of the model on a batch."""
    y = _check_labels(model, y)
    logits, _ = forward_trace(model, X)
    return _ce_from_logits(logits, y, sample_weight)


def _ce_from_logits(logits, y, sample_weight=None) -> float:
    # non-finite logits yield a NaN loss, which callers turn into an error
    with np.errstate(invalid="ignore", over="ignore"):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(len(y)), y]
    if sample_weight is None:
        return float(nll.mean())
    w = np.asarray(sample_weight, dtype=np.float64)
    return float((w * nll).sum() / w.sum())


def backward_stats(model: FpModel, X, y, sample_weight=None) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Gradients of the mean cross-entropy w.r.t. every parameter tensor.

    Returns one entry per layer: ``(dW, db)`` for conv1d/dense layers and
    ``None`` for activations. The model is not modified.
    """
    y = _check_labels(model, y)
    if len(y) == 0:
        raise UsageError("backward_stats needs a nonempty batch")
    ops.add_grad_call()
    logits, inputs = forward_trace(model, X)
    n = len(y)
    probs = softmax(logits)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    if sample_weight is None:
        delta /= n
    else:
        w = np.asarray(sample_weight, dtype=np.float64)
        delta *= (w / w.sum())[:, None]

    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer, a = model.layers[i], inputs[i]
        need_input_grad = i > 0
        if layer.kind == "dense":
            flat = a.reshape(n, -1)
            dW = delta.T @ flat
            db = delta.sum(axis=0)
            ops.add_macs(n * layer.weight.size * (2 if need_input_grad else 1))
            if need_input_grad:
                delta = (delta @ layer.weight).reshape(a.shape)
        elif layer.kind == "conv1d":
            k = layer.weight.shape[2]
            windows = np.lib.stride_tricks.sliding_window_view(a, k, axis=2)
            dW = np.einsum("nol,nclk->ock", delta, windows)
            db = delta.sum(axis=(0, 2))
            macs = n * layer.out_shape[1] * layer.weight.size
            ops.add_macs(macs * (2 if need_input_grad else 1))
            if need_input_grad:
                l_out = delta.shape[2]
                d_in = np.zeros_like(a)
                for t in range(k):
                    d_in[:, :, t:t + l_out] += np.einsum("nol,oc->ncl", delta, layer.weight[:, :, t])
                delta = d_in
        else:
            if need_input_grad:
                delta = delta * (a > 0)
            continue
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise NumericError(f"non-finite gradient in layer {i} ({layer.kind})")
        grads[i] = (dW, db)
    return grads


def sgd_step(model: FpModel, grads, learning_rate: float) -> None:
    for layer, g in zip(model.layers, grads):
        if g is None:
            continue
        layer.weight -= learning_rate * g[0]
        layer.bias -= learning_rate * g[1]


def train_epoch(model: FpModel, data, cfg: TrainConfig, sample_weight=None) -> float:
    """One epoch of mini-batch SGD; returns the mean cross-entropy seen during the epoch.

    The shuffle order is a function of ``cfg.seed`` and ``model.epoch_count``
    only, so identical inputs always give identical weights.
    """
    X = np.asarray(data.features, dtype=np.float64)
    y = _check_labels(model, data.labels)
    n = len(y)
    if n == 0:
        raise UsageError("cannot train on an empty dataset")
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFF, model.epoch_count])
    order = rng.permutation(n)
    total = 0.0
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        sw = None if sample_weight is None else np.asarray(sample_weight)[idx]
        logits, _ = forward_trace(model, X[idx])
        loss = _ce_from_logits(logits, y[idx], sw)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss in batch {b} of epoch {model.epoch_count}")
        grads = backward_stats(model, X[idx], y[idx], sw)
        sgd_step(model, grads, cfg.learning_rate)
        for _, _, p in model.parameters():
            if not np.all(np.isfinite(p)):
                raise NumericError(f"non-finite weights after batch {b} of epoch {model.epoch_count}")
        total += loss * len(idx)
    model.epoch_count += 1
    return total / n


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

FP_MAGIC = b"QCFP"
FP_VERSION = 1
_KIND_CODES = {"conv1d": 1, "dense": 2, "relu": 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _pack_array(arr: np.ndarray | None) -> bytes:
    if arr is None:
        return struct.pack("<B", 0)
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _unpack_array(buf: memoryview, pos: int) -> tuple[np.ndarray | None, int]:
    (ndim,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if ndim == 0:
        return None, pos
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64).reshape(shape)
    return arr, pos + 4 * count


def checkpoint_bytes(model: FpModel) -> bytes:
    arch = json.dumps(model.arch, sort_keys=True).encode("utf-8")
    out = [FP_MAGIC, struct.pack("<HH", FP_VERSION, len(model.layers))]
    out.append(struct.pack("<qI", model.seed, model.epoch_count))
    out.append(struct.pack("<I", len(arch)) + arch)
    for layer in model.layers:
        out.append(struct.pack("<B", _KIND_CODES[layer.kind]))
        out.append(_pack_array(layer.weight))
        out.append(_pack_array(layer.bias))
    return b"".join(out)


def save_checkpoint(model: FpModel, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path) -> FpModel:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    buf = memoryview(path.read_bytes())
    if bytes(buf[:4]) != FP_MAGIC:
        raise UsageError(f"{path}: not a QCFP checkpoint")
    version, n_layers = struct.unpack_from("<HH", buf, 4)
    if version != FP_VERSION:
        raise UsageError(f"{path}: unsupported checkpoint version {version}")
    seed, epoch_count = struct.unpack_from("<qI", buf, 8)
    (arch_len,) = struct.unpack_from("<I", buf, 20)
    arch = json.loads(bytes(buf[24:24 + arch_len]).decode("utf-8"))
    pos = 24 + arch_len
    model = build_model(arch, 0)
    if len(model.layers) != n_layers:
        raise UsageError(f"{path}: layer count {n_layers} does not match embedded architecture")
    for layer in model.layers:
        (code,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        if _CODE_KINDS.get(code) != layer.kind:
            raise UsageError(f"{path}: layer kind mismatch")
        layer.weight, pos = _unpack_array(buf, pos)
        layer.bias, pos = _unpack_array(buf, pos)
    model.seed, model.epoch_count = seed, epoch_count
    return model


def round_to_float32(model: FpModel) -> None:
    """Round parameters to float32 precision in place (what a checkpoint preserves)."""
    for _, _, p in model.parameters():
        p[...] = p.astype(np.float32).astype(np.float64)

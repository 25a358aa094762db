"""End-to-end continual-calibration experiments.

A *lane* is one seed: it owns the data, the trained full-precision model,
the miss table and the initial core. Every quantization level then runs its
own stream loop on top of the lane. Lanes are independent and may run in
worker processes; results merge by seed.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from qcore import bitflip, coreset, misses, nn, quant
from qcore._io import atomic_write_text, dumps_json
from qcore.bitflip import BitFlipNet, CalibrationConfig
from qcore.coreset import QCoreSet
from qcore.data import Dataset, DriftSpec, StreamBatch, load_csv, make_drift_pair, split_stream, train_test_split
from qcore.errors import QCoreError, UsageError
from qcore.misses import FULL_PRECISION, SUMMED, MissPmf, MissTable

log = logging.getLogger(__name__)

FULL, NO_UPDATE, NO_BF = "full", "no-update", "no-bf"
MODES = (FULL, NO_UPDATE, NO_BF)
QCORE, RANDOM, CORE_J, CORE_32 = "qcore", "random", "core-j", "core-32"
STRATEGIES = (QCORE, RANDOM, CORE_J, CORE_32)


def default_arch(dim: int = 16, num_classes: int = 4, channels: int = 4, kernel: int = 3) -> dict:
    """Small 1-D conv backbone: conv1d, ReLU, dense head."""
    width = dim - kernel + 1
    if width < 1:
        kernel, width = 1, dim
    return {
        "input_shape": [1, dim],
        "layers": [
            {"kind": "conv1d", "in_channels": 1, "out_channels": channels, "kernel_size": kernel},
            {"kind": "relu"},
            {"kind": "dense", "in_features": channels * width, "out_features": num_classes},
        ],
    }


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    arch: dict = field(default_factory=default_arch)
    levels: tuple[int, ...] = (2, 4, 8)
    core_budget: int = 30
    n_batches: int = 10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(0.01, 30, 32, 0))
    calib: CalibrationConfig = field(default_factory=CalibrationConfig)
    bf_train: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(0.05, 30, 64, 0))
    record_epochs: int = 20
    source_test_fraction: float = 0.2
    stream_test_fraction: float = 0.5
    drift: DriftSpec | None = field(default_factory=DriftSpec)
    source_csv: str | None = None
    target_csv: str | None = None
    num_classes: int | None = None

    def __post_init__(self) -> None:
        self.levels = misses.check_levels(self.levels)
        if FULL_PRECISION in self.levels:
            raise UsageError("level 32 is the full-precision model; it cannot be calibrated")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise UsageError("need at least one seed")
        if self.n_batches < 1:
            raise UsageError(f"n_batches must be >= 1, got {self.n_batches}")
        if self.core_budget < 1:
            raise UsageError(f"core_budget must be >= 1, got {self.core_budget}")
        if self.record_epochs < 1:
            raise UsageError(f"record_epochs must be >= 1, got {self.record_epochs}")
        if (self.source_csv is None) != (self.target_csv is None):
            raise UsageError("give both source_csv and target_csv, or neither")
        if self.source_csv is None and self.drift is None:
            raise UsageError("config needs a drift spec or CSV paths")
        nn.normalize_arch(self.arch)
        k = self.num_classes or (self.drift.num_classes if self.drift else None)
        if k is not None and self.core_budget < k:
            log.warning("core budget %d is below the number of classes %d", self.core_budget, k)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for key in ("train", "calib", "bf_train"):
            d[key] = asdict(d[key])
        d["drift"] = None if self.drift is None else asdict(self.drift)
        d["levels"] = list(self.levels)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        try:
            for key in ("train", "bf_train"):
                if key in d:
                    d[key] = nn.TrainConfig(**d[key])
            if "calib" in d:
                d["calib"] = CalibrationConfig(**d["calib"])
            if d.get("drift") is not None:
                d["drift"] = DriftSpec(**d["drift"])
            if "levels" in d:
                d["levels"] = tuple(d["levels"])
            if "seeds" in d:
                d["seeds"] = tuple(d["seeds"])
        except TypeError as exc:
            raise UsageError(f"bad config section: {exc}") from None
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise UsageError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    atomic_write_text(path, dumps_json(cfg.to_dict()))


def _with_seed(cfg: nn.TrainConfig | CalibrationConfig, seed: int):
    d = asdict(cfg)
    d["seed"] = seed
    return type(cfg)(**d)


# ---------------------------------------------------------------------------
# phase bookkeeping
# ---------------------------------------------------------------------------


class Clock:
    """Wall-clock milliseconds per phase."""

    def __init__(self) -> None:
        self.ms: dict[str, float] = {}

    @contextmanager
    def phase(self, name: str, context: str = "") -> Iterator[None]:
        start = time.perf_counter()
        try:
            with nn.ops.phase(name):
                yield
        except QCoreError as exc:
            where = f"{name}, {context}" if context else name
            raise type(exc)(f"[{where}] {exc}") from exc
        finally:
            self.ms[name] = self.ms.get(name, 0.0) + 1000 * (time.perf_counter() - start)


# ---------------------------------------------------------------------------
# lanes
# ---------------------------------------------------------------------------


@dataclass
class Lane:
    seed: int
    train: Dataset
    source_test: Dataset
    target: Dataset
    batches: list[StreamBatch]
    model: nn.FpModel
    table: MissTable
    pmf: MissPmf
    core: QCoreSet
    final_loss: float


def load_domains(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    if cfg.source_csv is not None:
        source = load_csv(cfg.source_csv, num_classes=cfg.num_classes)
        target = load_csv(cfg.target_csv, num_classes=source.num_classes, id_offset=len(source))
        return source, target
    spec = DriftSpec(**{**asdict(cfg.drift), "seed": cfg.drift.seed + seed})
    return make_drift_pair(spec)


def tracked_levels(cfg: ExperimentConfig) -> tuple[int, ...]:
    """Quantized levels plus the full-precision level (for the CORE_32 baseline)."""
    return tuple(cfg.levels) + (FULL_PRECISION,)


def train_with_misses(cfg: ExperimentConfig, train: Dataset, seed: int, clock: Clock | None = None
                      ) -> tuple[nn.FpModel, MissTable, float]:
    clock = clock or Clock()
    tcfg = _with_seed(cfg.train, seed)
    levels = tracked_levels(cfg)
    model = nn.build_model(cfg.arch, seed)
    table = MissTable.empty(train.ids, levels)
    loss = float("nan")
    for _ in range(tcfg.epochs):
        with clock.phase("fp_train", f"seed {seed}"):
            loss = nn.train_epoch(model, train, tcfg)
        with clock.phase("miss_tracking", f"seed {seed}"):
            misses.observe_epoch(table, model, levels, train)
    # the deployed model is what the checkpoint stores
    nn.round_to_float32(model)
    return model, table, loss


def prepare_lane(cfg: ExperimentConfig, seed: int, clock: Clock | None = None) -> Lane:
    clock = clock or Clock()
    with clock.phase("data", f"seed {seed}"):
        source, target = load_domains(cfg, seed)
        train, source_test = train_test_split(source, cfg.source_test_fraction, seed)
        batches = split_stream(target, cfg.n_batches, seed, cfg.stream_test_fraction)
    model, table, loss = train_with_misses(cfg, train, seed, clock)
    with clock.phase("qcore", f"seed {seed}"):
        pmf = misses.build_pmf(table, SUMMED, cfg.levels)
        core = coreset.sample_qcore(train, pmf, table, cfg.core_budget, seed)
    return Lane(seed, train, source_test, target, batches, model, table, pmf, core, loss)


@dataclass
class LevelStart:
    """Per-level state at deployment time."""

    level: int
    quantized: quant.QuantModel
    deployed: quant.QuantModel
    records: bitflip.DeltaRecords
    bf: BitFlipNet


def prepare_level(cfg: ExperimentConfig, lane: Lane, level: int, clock: Clock | None = None) -> LevelStart:
    clock = clock or Clock()
    ctx = f"seed {lane.seed}, level {level}"
    ccfg = _with_seed(cfg.calib, lane.seed)
    with clock.phase("quantize", ctx):
        qm = quant.quantize_model(lane.model, level)
    with clock.phase("bp_record", ctx):
        deployed, records = bitflip.record_calibration(qm, lane.core.examples, ccfg, cfg.record_epochs)
    with clock.phase("bf_train", ctx):
        bf = bitflip.train_bitflip(records, level, _with_seed(cfg.bf_train, lane.seed), lane.seed)
    return LevelStart(level, qm, deployed, records, bf)


def _update_seed(seed: int, level: int, t: int) -> int:
    return (seed * 1_000_003 + level * 7919 + t) & 0xFFFFFFFF


@dataclass
class StreamResult:
    accuracy: list[float]
    static_accuracy: list[float]
    core_sizes: list[int]
    max_code_drift: int = 0
    emitted: list[int] = field(default_factory=lambda: [0, 0, 0])
    invalid_steps: int = 0
    test_leaks: int = 0


def run_stream(cfg: ExperimentConfig, lane: Lane, start: LevelStart, mode: str = FULL,
               calibrator: str = "bf", clock: Clock | None = None) -> StreamResult:
    """The per-batch loop: refresh the core, then calibrate, then score the batch's test slice.

    ``calibrator="bp"`` swaps both the calibration and the update's shadow
    steps for back-propagation, as the reference for the efficiency comparison.
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    if calibrator not in ("bf", "bp"):
        raise UsageError(f"unknown calibrator {calibrator!r}")
    clock = clock or Clock()
    ccfg = _with_seed(cfg.calib, lane.seed)
    bf = start.bf
    bf.emitted[:] = 0
    bf.invalid = 0
    result = StreamResult([], [], [])
    suffix = "" if calibrator == "bf" else "_bp"

    def track(_epoch, before, after) -> None:
        drift = max(int(np.abs(a.codes.astype(np.int64) - b.codes).max()) for a, b in zip(after.tensors, before.tensors))
        result.max_code_drift = max(result.max_code_drift, drift)

    if calibrator == "bf":
        def step(qq, data):
            return bitflip.bf_epoch(qq, bf, data.features)
    else:
        def step(qq, data):
            return bitflip.bp_calibrate(qq, data, ccfg, epochs=1)

    qm, core = start.deployed, lane.core
    for batch in lane.batches:
        ctx = f"seed {lane.seed}, level {start.level}, batch {batch.index}"
        test_ids = set(int(i) for i in batch.test.ids)
        if mode != NO_UPDATE:
            with clock.phase("qcore_update" + suffix, ctx):
                core = coreset.update_qcore(core, batch, qm, ccfg.epochs,
                                            _update_seed(lane.seed, start.level, batch.index),
                                            step if mode == FULL else None)
        result.core_sizes.append(len(core))
        seen = set(int(i) for i in core.examples.ids) | set(int(i) for i in batch.examples.ids)
        result.test_leaks += len(test_ids & seen)
        if mode != NO_BF:
            with clock.phase("bf_calibrate" + suffix, ctx):
                if calibrator == "bf":
                    qm = bitflip.bf_calibrate(qm, bf, core, batch, ccfg, on_epoch=track)
                else:
                    qm = bitflip.bp_calibrate(qm, Dataset.union([core.examples, batch.examples]), ccfg)
        with clock.phase("evaluate", ctx):
            result.accuracy.append(quant.accuracy_quant(qm, batch.test.features, batch.test.labels))
            result.static_accuracy.append(
                quant.accuracy_quant(start.deployed, batch.test.features, batch.test.labels))
    result.emitted = [int(v) for v in bf.emitted]
    result.invalid_steps = bf.invalid
    return result


def convergence_probe(cfg: ExperimentConfig, lane: Lane, start: LevelStart, epochs: int = 20) -> list[float]:
    """Test accuracy on the first stream batch after each of ``epochs`` BF calibration epochs."""
    batch = lane.batches[0]
    accs: list[float] = []

    def score(_epoch, _before, after) -> None:
        accs.append(quant.accuracy_quant(after, batch.test.features, batch.test.labels))

    with nn.ops.phase("convergence_probe"):
        bitflip.bf_calibrate(start.deployed, start.bf, lane.core, batch, _with_seed(cfg.calib, lane.seed),
                             epochs=epochs, on_epoch=score)
    return accs


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class LaneReport:
    seed: int
    accuracy: dict[int, dict[str, list[float]]]       # level -> mode -> per-batch accuracy
    static_accuracy: dict[int, list[float]]
    core_sizes: dict[int, dict[str, list[int]]]
    info_loss: dict
    fp_source_accuracy: float
    fp_target_accuracy: float
    final_train_loss: float
    bf: dict[int, dict]
    convergence: dict[int, list[float]]
    counters: dict[str, dict[str, int]]
    runtimes_ms: dict[str, float]
    test_leaks: int = 0


def run_lane(cfg: ExperimentConfig, seed: int, modes=(FULL,), probes: bool = False,
             bp_reference: bool = False) -> LaneReport:
    nn.ops.reset()
    clock = Clock()
    lane = prepare_lane(cfg, seed, clock)
    loss = coreset.info_loss(lane.pmf, lane.core.selected)
    rep = LaneReport(
        seed=seed, accuracy={}, static_accuracy={}, core_sizes={},
        info_loss={"full_mean": loss.full_mean, "core_mean": loss.core_mean,
                   "epsilon": loss.epsilon, "bound": loss.bound, "within_bound": loss.within_bound},
        fp_source_accuracy=nn.accuracy(lane.model, lane.source_test.features, lane.source_test.labels),
        fp_target_accuracy=nn.accuracy(lane.model, lane.target.features, lane.target.labels),
        final_train_loss=lane.final_loss, bf={}, convergence={}, counters={}, runtimes_ms={},
    )
    for level in cfg.levels:
        start = prepare_level(cfg, lane, level, clock)
        rep.accuracy[level] = {}
        rep.core_sizes[level] = {}
        emitted = np.zeros(3, dtype=np.int64)
        drift = invalid = 0
        for mode in modes:
            res = run_stream(cfg, lane, start, mode, "bf", clock)
            rep.accuracy[level][mode] = res.accuracy
            rep.core_sizes[level][mode] = res.core_sizes
            rep.static_accuracy[level] = res.static_accuracy
            rep.test_leaks += res.test_leaks
            emitted += res.emitted
            invalid += res.invalid_steps
            drift = max(drift, res.max_code_drift)
        if bp_reference:
            res = run_stream(cfg, lane, start, FULL, "bp", clock)
            rep.accuracy[level]["bp-reference"] = res.accuracy
        labels = np.bincount(start.records.delta_p + 1, minlength=3)
        rep.bf[level] = {
            "records": len(start.records),
            "record_labels": [int(v) for v in labels],
            "train_accuracy": start.bf.train_accuracy,
            "degenerate": start.bf.degenerate,
            "emitted": [int(v) for v in emitted],
            "invalid_steps": int(invalid),
            "max_code_drift": int(drift),
        }
        if probes:
            rep.convergence[level] = convergence_probe(cfg, lane, start)
    rep.counters = nn.ops.snapshot()
    rep.runtimes_ms = clock.ms
    return rep


@dataclass
class ExperimentReport:
    config: dict
    modes: tuple[str, ...]
    levels: tuple[int, ...]
    lanes: list[LaneReport]

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.lanes]

    def accuracy_matrix(self, mode: str = FULL) -> np.ndarray:
        """(seed, batch, level) per-batch accuracy."""
        return np.array([[[r.accuracy[j][mode][t] for j in self.levels]
                          for t in range(len(r.accuracy[self.levels[0]][mode]))] for r in self.lanes])

    def averages(self, mode: str = FULL) -> dict[int, float]:
        acc = self.accuracy_matrix(mode)
        return {j: float(acc[:, :, c].mean()) for c, j in enumerate(self.levels)}

    def seed_averages(self, mode: str = FULL) -> np.ndarray:
        """Mean over batches and levels, per seed."""
        return self.accuracy_matrix(mode).mean(axis=(1, 2))

    def counters(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for r in self.lanes:
            for ph, bucket in r.counters.items():
                dst = out.setdefault(ph, {"macs": 0, "grad_calls": 0, "forward_calls": 0})
                for k, v in bucket.items():
                    dst[k] += v
        return dict(sorted(out.items()))

    def runtimes(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.lanes:
            for ph, ms in r.runtimes_ms.items():
                out[ph] = out.get(ph, 0.0) + ms
        return dict(sorted(out.items()))

    def summary(self) -> dict:
        return {
            "config": self.config,
            "modes": list(self.modes),
            "levels": list(self.levels),
            "seeds": self.seeds,
            "averages": {m: {str(j): a for j, a in self.averages(m).items()} for m in self.modes},
            "lanes": [
                {
                    "seed": r.seed,
                    "info_loss": r.info_loss,
                    "fp_source_accuracy": r.fp_source_accuracy,
                    "fp_target_accuracy": r.fp_target_accuracy,
                    "final_train_loss": r.final_train_loss,
                    "bitflip": {str(j): v for j, v in r.bf.items()},
                    "convergence": {str(j): v for j, v in r.convergence.items()},
                    "test_leaks": r.test_leaks,
                }
                for r in self.lanes
            ],
            "counters": self.counters(),
        }

    def accuracy_table(self) -> str:
        lines = ["mode\tseed\tbatch\tlevel\taccuracy"]
        for mode in self.modes:
            for r in self.lanes:
                for j in self.levels:
                    for t, a in enumerate(r.accuracy[j][mode]):
                        lines.append(f"{mode}\t{r.seed}\t{t}\t{j}\t{a!r}")
        return "\n".join(lines) + "\n"

    def averages_table(self) -> str:
        lines = ["mode\t" + "\t".join(f"{j}-bit" for j in self.levels) + "\tmean"]
        for mode in self.modes:
            av = self.averages(mode)
            vals = [av[j] for j in self.levels]
            lines.append(mode + "".join(f"\t{v:.4f}" for v in vals) + f"\t{np.mean(vals):.4f}")
        return "\n".join(lines) + "\n"

    def counters_table(self) -> str:
        lines = ["phase\tmacs\tgrad_calls\tforward_calls"]
        for ph, b in self.counters().items():
            lines.append(f"{ph}\t{b['macs']}\t{b['grad_calls']}\t{b['forward_calls']}")
        return "\n".join(lines) + "\n"

    def runtimes_table(self) -> str:
        return "phase\tmilliseconds\n" + "".join(f"{ph}\t{ms:.1f}\n" for ph, ms in self.runtimes().items())

    def save(self, out_dir) -> list[Path]:
        """Write the report. Runtimes go to their own file since they vary run to run."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "accuracy.tsv": self.accuracy_table(),
            "averages.tsv": self.averages_table(),
            "counters.tsv": self.counters_table(),
            "summary.json": dumps_json(self.summary()),
            "runtimes.tsv": self.runtimes_table(),
        }
        for name, text in files.items():
            atomic_write_text(out / name, text)
        return [out / n for n in files]


def _lane_job(args) -> LaneReport:
    cfg_dict, seed, modes, probes, bp_reference = args
    return run_lane(ExperimentConfig.from_dict(cfg_dict), seed, modes, probes, bp_reference)


def run_lanes(cfg: ExperimentConfig, modes=(FULL,), probes: bool = False, bp_reference: bool = False,
              workers: int = 1) -> ExperimentReport:
    jobs = [(cfg.to_dict(), s, tuple(modes), probes, bp_reference) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            lanes = list(pool.map(_lane_job, jobs))
    else:
        lanes = [_lane_job(j) for j in jobs]
    lanes.sort(key=lambda r: r.seed)
    return ExperimentReport(cfg.to_dict(), tuple(modes), tuple(cfg.levels), lanes)


def run_pipeline(cfg: ExperimentConfig, mode: str = FULL, workers: int = 1) -> ExperimentReport:
    return run_lanes(cfg, (mode,), workers=workers)


def run_ablation(cfg: ExperimentConfig, modes=MODES, workers: int = 1, probes: bool = False) -> ExperimentReport:
    """All modes per lane, so they share data, initial model and initial core."""
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}")
    return run_lanes(cfg, tuple(modes), probes=probes, workers=workers)


# ---------------------------------------------------------------------------
# subset comparison
# ---------------------------------------------------------------------------


def build_subset(strategy: str, lane: Lane, cfg: ExperimentConfig, level: int | None = None) -> QCoreSet | Dataset:
    seed = lane.seed
    if strategy == QCORE:
        return lane.core
    if strategy == RANDOM:
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x4A4D])
        pos = np.sort(rng.choice(len(lane.train), size=cfg.core_budget, replace=False))
        return lane.train.subset(pos)
    if strategy == CORE_J:
        if level is None:
            raise UsageError("core-j needs a level")
        pmf = misses.build_pmf(lane.table, level)
    elif strategy == CORE_32:
        pmf = misses.build_pmf(lane.table, FULL_PRECISION)
    else:
        raise UsageError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    return coreset.sample_qcore(lane.train, pmf, lane.table, cfg.core_budget, seed)


@dataclass
class SubsetComparison:
    levels: tuple[int, ...]
    strategies: tuple[str, ...]
    # seed -> strategy -> level -> accuracy; CORE_J is the matched-level core
    accuracy: dict[int, dict[str, dict[int, float]]]
    # seed -> core level -> eval level -> accuracy
    core_j_matrix: dict[int, dict[int, dict[int, float]]]

    def cross_level(self, strategy: str) -> np.ndarray:
        """Per-seed mean over levels."""
        return np.array([np.mean([self.accuracy[s][strategy][j] for j in self.levels]) for s in sorted(self.accuracy)])

    def matched_vs_mismatched(self) -> tuple[float, float]:
        matched, mismatched = [], []
        for m in self.core_j_matrix.values():
            for cj, row in m.items():
                for ej, a in row.items():
                    (matched if cj == ej else mismatched).append(a)
        return float(np.mean(matched)), float(np.mean(mismatched))

    def table(self) -> str:
        lines = ["strategy\t" + "\t".join(f"{j}-bit" for j in self.levels) + "\tmean"]
        for st in self.strategies:
            per = [np.mean([self.accuracy[s][st][j] for s in self.accuracy]) for j in self.levels]
            lines.append(st + "".join(f"\t{v:.4f}" for v in per) + f"\t{np.mean(per):.4f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "strategies": list(self.strategies),
            "accuracy": {str(s): {st: {str(j): a for j, a in row.items()} for st, row in v.items()}
                         for s, v in self.accuracy.items()},
            "core_j_matrix": {str(s): {str(c): {str(e): a for e, a in row.items()} for c, row in m.items()}
                              for s, m in self.core_j_matrix.items()},
        }

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "subsets.tsv", self.table())
        atomic_write_text(out / "subsets.json", dumps_json(self.to_dict()))


def _examples(subset) -> Dataset:
    return subset.examples if isinstance(subset, QCoreSet) else subset


def compare_lane(cfg: ExperimentConfig, seed: int, strategies=STRATEGIES) -> tuple[dict, dict]:
    """BP-calibrate each level on each subset; score on the held-out source split."""
    lane = prepare_lane(cfg, seed)
    ccfg = _with_seed(cfg.calib, seed)
    test = lane.source_test
    quantized = {j: quant.quantize_model(lane.model, j) for j in cfg.levels}

    def score(subset, j: int) -> float:
        qm = bitflip.bp_calibrate(quantized[j], _examples(subset), ccfg, cfg.record_epochs)
        return quant.accuracy_quant(qm, test.features, test.labels)

    acc: dict[str, dict[int, float]] = {}
    matrix: dict[int, dict[int, float]] = {}
    for st in strategies:
        if st == CORE_J:
            for cj in cfg.levels:
                sub = build_subset(CORE_J, lane, cfg, cj)
                matrix[cj] = {ej: score(sub, ej) for ej in cfg.levels}
            acc[st] = {j: matrix[j][j] for j in cfg.levels}
        else:
            sub = build_subset(st, lane, cfg)
            acc[st] = {j: score(sub, j) for j in cfg.levels}
    return acc, matrix


def _compare_job(args):
    cfg_dict, seed, strategies = args
    return seed, compare_lane(ExperimentConfig.from_dict(cfg_dict), seed, strategies)


def run_subset_comparison(cfg: ExperimentConfig, strategies=STRATEGIES, workers: int = 1) -> SubsetComparison:
    for st in strategies:
        if st not in STRATEGIES:
            raise UsageError(f"unknown strategy {st!r}; choose from {', '.join(STRATEGIES)}")
    jobs = [(cfg.to_dict(), s, tuple(strategies)) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_compare_job, jobs))
    else:
        results = [_compare_job(j) for j in jobs]
    acc = {s: a for s, (a, _) in results}
    matrix = {s: m for s, (_, m) in results if m}
    return SubsetComparison(tuple(cfg.levels), tuple(strategies), acc, matrix)


# ---------------------------------------------------------------------------
# operation counts
# ---------------------------------------------------------------------------


def count_ops(qm: quant.QuantModel, bf: BitFlipNet, data: Dataset, cfg: CalibrationConfig
              ) -> dict[str, dict[str, int]]:
    """Counters for one BF calibration epoch and one BP calibration epoch on the same model and data."""
    counter = nn.ops
    saved = counter.snapshot()
    counter.reset()
    try:
        with counter.phase("bf_epoch"):
            bitflip.bf_epoch(qm, bf, data.features)
        with counter.phase("bp_epoch"):
            bitflip.bp_calibrate(qm, data, cfg, epochs=1)
        return counter.snapshot()
    finally:
        counter.phases = saved

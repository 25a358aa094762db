"""Quantization-miss tracking during full-precision training.

After every training epoch the model is quantized to each tracked level and
every example is re-scored. A miss is counted when an example that was
classified correctly after the previous epoch is misclassified now. The
first observation only seeds the correctness state.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qcore import nn, quant
from qcore._io import atomic_write_text
from qcore.errors import UsageError

FULL_PRECISION = 32
SUMMED = "summed"


def check_levels(levels) -> tuple[int, ...]:
    levels = tuple(int(j) for j in levels)
    if not levels:
        raise UsageError("need at least one quantization level")
    if len(set(levels)) != len(levels):
        raise UsageError(f"duplicate quantization levels in {levels}")
    for j in levels:
        if j != FULL_PRECISION:
            quant.check_bits(j)
    return levels


def proxy_model(model: nn.FpModel, level: int) -> nn.FpModel:
    """Temporary model at ``level`` bits; level 32 is the model itself."""
    if level == FULL_PRECISION:
        return model
    return quant.dequantize(quant.quantize_model(model, level))


@dataclass
class MissTable:
    ids: np.ndarray
    levels: tuple[int, ...]
    misses: np.ndarray        # (n, len(levels)) int64
    last_correct: np.ndarray  # (n, len(levels)) int8; -1 until first observation
    epochs_observed: int = 0

    @classmethod
    def empty(cls, ids, levels) -> "MissTable":
        ids = np.asarray(ids, dtype=np.int64)
        levels = check_levels(levels)
        if len(np.unique(ids)) != len(ids):
            raise UsageError("example ids must be unique")
        shape = (len(ids), len(levels))
        return cls(ids, levels, np.zeros(shape, dtype=np.int64), np.full(shape, -1, dtype=np.int8))

    def column(self, level: int) -> int:
        try:
            return self.levels.index(int(level))
        except ValueError:
            raise UsageError(f"level {level} is not tracked (levels {self.levels})") from None

    def counts_for(self, level: int) -> np.ndarray:
        return self.misses[:, self.column(level)]


def record_outcomes(table: MissTable, correct: np.ndarray) -> MissTable:
    """Fold one epoch of correctness flags (shape ``(n, len(levels))``) into the table."""
    correct = np.asarray(correct, dtype=np.int8).reshape(table.misses.shape)
    table.misses += (table.last_correct == 1) & (correct == 0)
    table.last_correct = correct.copy()
    table.epochs_observed += 1
    return table


def observe_epoch(table: MissTable, model: nn.FpModel, levels, data) -> MissTable:
    """Score ``data`` under a temporary proxy per level and count new misses.

    The model itself is never modified.
    """
    levels = check_levels(levels)
    if levels != table.levels:
        raise UsageError(f"levels {levels} do not match the table's {table.levels}")
    if len(data.ids) != len(table.ids) or not np.array_equal(data.ids, table.ids):
        raise UsageError("dataset ids do not match the ids registered in the miss table")
    correct = np.empty(table.misses.shape, dtype=np.int8)
    for col, level in enumerate(levels):
        correct[:, col] = nn.predict(proxy_model(model, level), data.features) == data.labels
    return record_outcomes(table, correct)


@dataclass
class MissPmf:
    """Histogram {(k, N_k)} of examples with exactly k misses (nonzero bins only)."""

    bins: list[tuple[int, int]]
    level: int | str
    levels: tuple[int, ...] = ()

    @property
    def max_misses(self) -> int:
        return max((k for k, n in self.bins if n > 0), default=0)

    @property
    def total(self) -> int:
        return sum(n for _, n in self.bins)

    def as_dict(self) -> dict[int, int]:
        return dict(self.bins)


def _histogram(counts: np.ndarray) -> dict[int, int]:
    hist = np.bincount(counts.ravel()) if counts.size else np.zeros(0, dtype=np.int64)
    return {k: int(n) for k, n in enumerate(hist) if n > 0}


def summed_levels(table: MissTable, levels=None) -> tuple[int, ...]:
    """Levels entering a summed PMF: as given, else every tracked quantized level.

    Level 32 only joins the sum when asked for explicitly (or when it is the
    only level tracked).
    """
    if levels is None:
        levels = tuple(j for j in table.levels if j != FULL_PRECISION) or table.levels
    levels = check_levels(levels)
    for j in levels:
        table.column(j)
    return levels


def build_pmf(table: MissTable, level: int | str = SUMMED, levels=None) -> MissPmf:
    """Per-level PMF, or the sum of the per-level PMFs when ``level`` is ``"summed"``."""
    if table.epochs_observed < 1:
        raise UsageError("miss table has no observed epochs")
    if level == SUMMED:
        levels = summed_levels(table, levels)
        total: dict[int, int] = {}
        for j in levels:
            for k, n in _histogram(table.counts_for(j)).items():
                total[k] = total.get(k, 0) + n
        return MissPmf(sorted(total.items()), SUMMED, levels)
    level = int(level)
    return MissPmf(sorted(_histogram(table.counts_for(level)).items()), level, (level,))


def bin_members(table: MissTable, level: int | str = SUMMED, levels=None) -> dict[int, list[int]]:
    """Example ids in each miss bin.

    For the summed distribution an example sits in the bin of its count at
    every summed level, so it may belong to several bins.
    """
    levels = summed_levels(table, levels) if level == SUMMED else (int(level),)
    members: dict[int, set[int]] = {}
    for j in levels:
        for i, k in zip(table.ids, table.counts_for(j)):
            members.setdefault(int(k), set()).add(int(i))
    return {k: sorted(v) for k, v in sorted(members.items())}


# ---------------------------------------------------------------------------
# text exports
# ---------------------------------------------------------------------------


def miss_table_text(table: MissTable) -> str:
    buf = io.StringIO()
    buf.write(f"# epochs_observed={table.epochs_observed}\n")
    buf.write("example_id\tlevel\tmisses\n")
    for row, i in enumerate(table.ids):
        for col, j in enumerate(table.levels):
            buf.write(f"{int(i)}\t{j}\t{int(table.misses[row, col])}\n")
    return buf.getvalue()


def save_miss_table(table: MissTable, path) -> None:
    atomic_write_text(path, miss_table_text(table))


def load_miss_table(path) -> MissTable:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"miss table not found: {path}")
    epochs = 0
    rows = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if "epochs_observed=" in line:
                epochs = int(line.split("epochs_observed=")[1])
            continue
        if line.startswith("example_id"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise UsageError(f"{path}: line {line_no}: expected 3 tab-separated fields")
        try:
            rows.append(tuple(int(p) for p in parts))
        except ValueError:
            raise UsageError(f"{path}: line {line_no}: non-integer field") from None
    if not rows:
        raise UsageError(f"{path}: no rows")
    ids = list(dict.fromkeys(r[0] for r in rows))
    levels = list(dict.fromkeys(r[1] for r in rows))
    table = MissTable.empty(ids, levels)
    pos = {i: p for p, i in enumerate(ids)}
    for i, j, m in rows:
        if m < 0:
            raise UsageError(f"{path}: negative miss count for example {i}")
        table.misses[pos[i], table.column(j)] = m
    table.epochs_observed = max(epochs, int(table.misses.max()) + 1)
    return table


def pmf_text(pmf: MissPmf) -> str:
    return "k\tN_k\n" + "".join(f"{k}\t{n}\n" for k, n in pmf.bins)

"""QCore construction: miss-distribution matched sampling, information loss, updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from qcore import quant
from qcore._io import atomic_write_text, dumps_json
from qcore.data import Dataset, StreamBatch
from qcore.errors import UsageError
from qcore.misses import SUMMED, MissPmf, MissTable, bin_members, record_outcomes


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def raw_quotas(counts: Mapping[int, int], lam: Fraction) -> dict[int, int]:
    """Per-bin ``round(lam * N_k)`` with halves rounded up."""
    return {k: round_half_up(lam * n) for k, n in sorted(counts.items())}


def apportion(counts: Mapping[int, int], budget: int) -> dict[int, int]:
    """Largest-remainder apportionment of ``budget`` over bins in proportion to ``counts``.

    Every bin first gets ``floor(lam * N_k)`` with ``lam = budget / sum(N_k)``;
    the leftover seats go to the largest fractional parts, ties to larger k.
    Arithmetic is exact.
    """
    total = sum(counts.values())
    if total <= 0:
        raise UsageError("cannot apportion over an empty distribution")
    if budget < 0:
        raise UsageError(f"budget must be >= 0, got {budget}")
    lam = Fraction(budget, total)
    shares = {k: lam * n for k, n in counts.items()}
    quotas = {k: math.floor(s) for k, s in shares.items()}
    leftover = budget - sum(quotas.values())
    order = sorted(shares, key=lambda k: (shares[k] - quotas[k], k), reverse=True)
    for k in order[:leftover]:
        quotas[k] += 1
    return dict(sorted(quotas.items()))


@dataclass
class QCoreSet:
    ids: list[int]
    budget: int
    pmf: MissPmf
    lam: float
    seed: int
    quotas: dict[int, int]
    raw_quotas: dict[int, int]
    selected: dict[int, int]
    warnings: list[str] = field(default_factory=list)
    examples: Dataset | None = None

    def __len__(self) -> int:
        return len(self.ids)


def _draw(members: Mapping[int, list[int]], quotas: Mapping[int, int], seed: int
          ) -> tuple[list[int], dict[int, int], list[str]]:
    """Draw ``quotas[k]`` distinct ids from each bin, spilling shortfalls to the nearest bin."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xC02E])
    chosen: set[int] = set()
    selected = {k: 0 for k in quotas}
    warnings = []

    def take(k: int, want: int) -> int:
        avail = [i for i in members.get(k, []) if i not in chosen]
        n = min(want, len(avail))
        if n:
            picks = rng.choice(len(avail), size=n, replace=False)
            chosen.update(avail[p] for p in picks)
            selected[k] = selected.get(k, 0) + n
        return n

    shortfall = {}
    for k in sorted(quotas, reverse=True):
        got = take(k, quotas[k])
        if got < quotas[k]:
            shortfall[k] = quotas[k] - got
    for k, missing in sorted(shortfall.items(), reverse=True):
        neighbours = sorted((b for b in members if b != k), key=lambda b: (abs(b - k), -b))
        for b in neighbours:
            if not missing:
                break
            got = take(b, missing)
            if got:
                warnings.append(f"bin {k} exhausted: {got} of its quota drawn from bin {b}")
                missing -= got
        if missing:
            raise UsageError(f"not enough distinct examples to fill the quota of bin {k}")
    return sorted(chosen), selected, warnings


def sample_qcore(pool: Dataset | None, pmf: MissPmf, table: MissTable, budget: int, seed: int) -> QCoreSet:
    """Sample ``budget`` examples from ``pool`` matching the miss distribution ``pmf``.

    For a single-level PMF the per-bin quotas are the largest-remainder
    apportionment of ``budget`` over ``N_k`` (so ``lam = budget / |pool|``).
    For the summed PMF the same apportionment runs over the summed counts,
    which preserves the proportions of the averaged per-level distribution.
    With ``pool=None`` only ids are drawn (the table's ids form the pool).
    """
    n = len(table.ids)
    if budget > n:
        raise UsageError(f"budget {budget} exceeds pool size {n}")
    if budget < 1:
        raise UsageError(f"budget must be >= 1, got {budget}")
    if pool is not None and not np.array_equal(np.sort(pool.ids), np.sort(table.ids)):
        raise UsageError("miss table does not cover exactly the pool's examples")
    counts = pmf.as_dict()
    quotas = apportion(counts, budget)
    raw = raw_quotas(counts, Fraction(budget, sum(counts.values())))
    members = bin_members(table, pmf.level, pmf.levels or None)
    ids, selected, warnings = _draw(members, quotas, seed)
    return QCoreSet(ids, budget, pmf, budget / n, int(seed), quotas, raw, selected, warnings,
                    None if pool is None else pool.select_ids(ids))


# ---------------------------------------------------------------------------
# information loss
# ---------------------------------------------------------------------------


@dataclass
class InfoLossReport:
    full_mean: float
    core_mean: float
    epsilon: float
    bound: int

    @property
    def within_bound(self) -> bool:
        return self.epsilon <= self.bound


def info_loss(pmf_full: MissPmf, core_counts: Mapping[int, int], core_size: int | None = None) -> InfoLossReport:
    """Gap between mean misses per example on the full set and on the core.

    ``core_counts`` maps miss level k to the number of core examples at that
    level. ``core_size`` is the normaliser for the core mean; it defaults to
    ``sum(core_counts)`` and is ``round(lam * |D|)`` for the textbook form.
    """
    n_full = pmf_full.total
    size = sum(core_counts.values()) if core_size is None else core_size
    if size <= 0:
        raise UsageError("core is empty")
    if n_full <= 0:
        raise UsageError("full distribution is empty")
    full = Fraction(sum(k * n for k, n in pmf_full.bins), n_full)
    core = Fraction(sum(k * c for k, c in core_counts.items()), size)
    # The bound K can fail in the textbook form when round(lam*|D|) is tiny
    # and several bins round up; callers check ``within_bound``.
    eps = abs(full - core)
    return InfoLossReport(float(full), float(core), float(eps), pmf_full.max_misses)


def textbook_info_loss(pmf_full: MissPmf, lam: Fraction) -> InfoLossReport:
    """Information loss of a core built with per-bin ``round(lam * N_k)`` counts."""
    lam = Fraction(lam)
    core = raw_quotas(pmf_full.as_dict(), lam)
    return info_loss(pmf_full, core, round_half_up(lam * pmf_full.total))


# ---------------------------------------------------------------------------
# stream update
# ---------------------------------------------------------------------------

# advances a quantized model by one calibration epoch on the given examples
Stepper = Callable[[quant.QuantModel, Dataset], quant.QuantModel]


def scale_up(ids: list[int], target_size: int) -> list[int]:
    """Replicate the ids ceil(target/len) times and truncate to the target size.

    Copies are laid out round-robin, so every id survives the truncation, and
    the result never shrinks below ``len(ids)``.
    """
    if not ids:
        raise UsageError("cannot scale an empty core")
    size = max(target_size, len(ids))
    reps = max(1, math.ceil(size / len(ids)))
    return (list(ids) * reps)[:size]


def update_qcore(core: QCoreSet, batch: StreamBatch | Dataset, qm: quant.QuantModel, epochs: int,
                 seed: int, step: Stepper | None = None) -> QCoreSet:
    """Refresh the core with a labeled stream batch, keeping its size.

    The scaled-up core and the batch are scored for ``epochs`` epochs at the
    model's own bit width. ``step`` shadows the calibration running alongside:
    it advances the model between epochs (without it the model is static and
    no new misses can occur). The new core is sampled from the union by the
    union's miss distribution; replicated ids collapse to one.
    """
    new = batch.examples if isinstance(batch, StreamBatch) else batch
    if len(new) == 0:
        raise UsageError("stream batch is empty")
    if core.examples is None:
        raise UsageError("core carries no example data")
    if epochs < 1:
        raise UsageError(f"epochs must be >= 1, got {epochs}")
    overlap = set(core.ids) & set(int(i) for i in new.ids)
    if overlap:
        raise UsageError(f"stream batch repeats core ids {sorted(overlap)[:5]}")

    scaled = scale_up(list(core.ids), len(new))
    union = Dataset.concat([core.examples, new], domain="union")
    table = MissTable.empty(union.ids, [qm.bit_width])
    model = qm
    for _ in range(epochs):
        if step is not None:
            model = step(model, union)
        correct = quant.predict_quant(model, union.features) == union.labels
        record_outcomes(table, correct[:, None])

    per_id = {int(i): int(m) for i, m in zip(table.ids, table.misses[:, 0])}
    entries = scaled + [int(i) for i in new.ids]
    counts: dict[int, int] = {}
    members: dict[int, set[int]] = {}
    for i in entries:
        k = per_id[i]
        counts[k] = counts.get(k, 0) + 1
        members.setdefault(k, set()).add(i)
    budget = core.budget
    quotas = apportion(counts, budget)
    raw = raw_quotas(counts, Fraction(budget, len(entries)))
    ids, selected, warnings = _draw({k: sorted(v) for k, v in members.items()}, quotas, seed)
    pmf = MissPmf(sorted(counts.items()), qm.bit_width, (qm.bit_width,))
    return QCoreSet(ids, budget, pmf, budget / len(entries), int(seed), quotas, raw, selected,
                    warnings, union.select_ids(ids))


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def qcore_dict(core: QCoreSet) -> dict:
    return {
        "budget": core.budget,
        "lambda": core.lam,
        "seed": core.seed,
        "level": core.pmf.level,
        "levels": list(core.pmf.levels),
        "bins": [
            {"k": k, "N_k": n, "raw_quota": core.raw_quotas.get(k, 0), "quota": core.quotas.get(k, 0),
             "selected": core.selected.get(k, 0)}
            for k, n in core.pmf.bins
        ],
        "ids": [int(i) for i in core.ids],
        "warnings": list(core.warnings),
    }


def save_qcore(core: QCoreSet, path) -> None:
    atomic_write_text(path, dumps_json(qcore_dict(core)))


def load_qcore(path, pool: Dataset | None = None) -> QCoreSet:
    import json

    path = Path(path)
    if not path.exists():
        raise UsageError(f"QCore file not found: {path}")
    d = json.loads(path.read_text(encoding="utf-8"))
    bins = d["bins"]
    pmf = MissPmf([(b["k"], b["N_k"]) for b in bins], d["level"], tuple(d.get("levels", ())))
    core = QCoreSet(
        ids=[int(i) for i in d["ids"]],
        budget=int(d["budget"]),
        pmf=pmf,
        lam=float(d["lambda"]),
        seed=int(d["seed"]),
        quotas={b["k"]: b["quota"] for b in bins},
        raw_quotas={b["k"]: b["raw_quota"] for b in bins},
        selected={b["k"]: b["selected"] for b in bins},
        warnings=list(d.get("warnings", [])),
    )
    if pool is not None:
        core.examples = pool.select_ids(core.ids)
    return core

"""Datasets, CSV ingestion, synthetic drift pairs and stream splitting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qcore._io import atomic_write_text
from qcore.errors import UsageError


@dataclass
class Dataset:
    """Labeled examples with stable integer ids.

    ``features`` is an ``(n, d)`` float array, ``labels`` and ``ids`` are
    length-``n`` integer arrays.
    """

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain: str = ""

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape[0] != n or len(self.labels) != n:
            raise UsageError(
                f"inconsistent dataset: {n} ids, features {self.features.shape}, {len(self.labels)} labels"
            )
        if len(np.unique(self.ids)) != n:
            raise UsageError("example ids must be unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise UsageError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(self.ids[positions], self.features[positions], self.labels[positions],
                       self.num_classes, self.domain)

    def select_ids(self, ids) -> "Dataset":
        """Rows for the given ids, in the order given."""
        index = {int(i): p for p, i in enumerate(self.ids)}
        try:
            positions = [index[int(i)] for i in ids]
        except KeyError as exc:
            raise UsageError(f"example id {exc.args[0]} is not in dataset {self.domain!r}") from None
        return self.subset(positions)

    @staticmethod
    def concat(parts: list["Dataset"], domain: str = "") -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise UsageError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            max(p.num_classes for p in parts),
            domain or parts[0].domain,
        )

    @staticmethod
    def union(parts: list["Dataset"], domain: str = "") -> "Dataset":
        """Concatenate, keeping only the first occurrence of each id."""
        parts = [p for p in parts if len(p)]
        if not parts:
            raise UsageError("nothing to merge")
        ids = np.concatenate([p.ids for p in parts])
        _, first = np.unique(ids, return_index=True)
        keep = np.sort(first)
        return Dataset(
            ids[keep],
            np.concatenate([p.features for p in parts])[keep],
            np.concatenate([p.labels for p in parts])[keep],
            max(p.num_classes for p in parts),
            domain or parts[0].domain,
        )


@dataclass
class StreamBatch:
    index: int
    examples: Dataset
    test: Dataset


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_csv(path, feature_columns=None, label_column=None, num_classes=None, id_offset=0) -> Dataset:
    """Read a headered CSV: feature columns, then a label column.

    By default every column but the last is a feature and the last is the
    label. Ids follow row order starting at ``id_offset``.
    """
    path = Path(path)
    if not path.exists():
        raise UsageError(f"CSV file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path}: empty file") from None
        label_column = label_column or header[-1]
        if feature_columns is None:
            feature_columns = [c for c in header if c != label_column]
        try:
            f_idx = [header.index(c) for c in feature_columns]
            l_idx = header.index(label_column)
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from None
        feats, labels = [], []
        # row numbers are 1-based and count the header as row 1
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise UsageError(f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            try:
                feats.append([float(row[i]) for i in f_idx])
                label = float(row[l_idx])
            except ValueError as exc:
                raise UsageError(f"{path}: row {row_no}: {exc}") from None
            if label != int(label) or label < 0:
                raise UsageError(f"{path}: row {row_no}: invalid label {row[l_idx]!r}")
            labels.append(int(label))
    if not labels:
        raise UsageError(f"{path}: no data rows")
    k = num_classes if num_classes is not None else max(labels) + 1
    for row_no, label in enumerate(labels, start=2):
        if label >= k:
            raise UsageError(f"{path}: row {row_no}: unknown label {label} (num_classes={k})")
    ids = np.arange(id_offset, id_offset + len(labels))
    return Dataset(ids, np.array(feats, dtype=np.float64), np.array(labels), k, domain=path.stem)


def save_csv(data: Dataset, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{i}" for i in range(data.dim)] + ["label"])
    for x, y in zip(data.features, data.labels):
        writer.writerow([repr(float(v)) for v in x] + [int(y)])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# synthetic drift
# ---------------------------------------------------------------------------


@dataclass
class DriftSpec:
    dim: int = 16
    num_classes: int = 4
    n_source: int = 2000
    n_target: int = 1000
    shift: float = 3.0
    seed: int = 0
    cluster_spread: float = 0.6
    cluster_std: float = 1.0

    def __post_init__(self) -> None:
        if self.shift < 0:
            raise UsageError(f"shift magnitude must be >= 0, got {self.shift}")
        if self.dim < 1 or self.num_classes < 2 or self.n_source < 1 or self.n_target < 1:
            raise UsageError("drift spec needs dim >= 1, num_classes >= 2 and nonempty domains")


def _sample_clusters(rng, means, stds, n) -> tuple[np.ndarray, np.ndarray]:
    k, d = means.shape
    labels = np.arange(n) % k
    labels = labels[rng.permutation(n)]
    noise = rng.standard_normal((n, d))
    return means[labels] + noise * stds[labels], labels


def make_drift_pair(spec: DriftSpec) -> tuple[Dataset, Dataset]:
    """Gaussian class clusters for a source domain and a shifted target domain.

    The target translates every class mean by ``spec.shift`` along one seeded
    unit direction in the span of the centred class means and rescales each
    class's per-axis spread by a factor that grows with the shift (exactly 1
    when the shift is zero).
    """
    rng = np.random.default_rng([int(spec.seed) & 0xFFFFFFFF, 0xD21F7])
    k, d = spec.num_classes, spec.dim
    means = rng.standard_normal((k, d)) * spec.cluster_spread
    stds = np.full((k, d), spec.cluster_std)

    # a random mix of the centred class means, so the shift moves clusters
    # across decision boundaries instead of along them
    centred = means - means.mean(axis=0)
    direction = rng.standard_normal(k) @ centred
    norm = np.linalg.norm(direction)
    if norm == 0:
        direction = rng.standard_normal(d)
        norm = np.linalg.norm(direction)
    direction /= norm
    perturb = rng.standard_normal((k, d))
    t_means = means + spec.shift * direction
    t_stds = stds * np.exp(0.05 * spec.shift * perturb)

    xs, ys = _sample_clusters(rng, means, stds, spec.n_source)
    xt, yt = _sample_clusters(rng, t_means, t_stds, spec.n_target)
    source = Dataset(np.arange(spec.n_source), xs, ys, k, domain="source")
    target = Dataset(np.arange(spec.n_source, spec.n_source + spec.n_target), xt, yt, k, domain="target")
    return source, target


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5B17])
    order = rng.permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


def split_stream(target: Dataset, n_batches: int, seed: int, test_fraction: float = 0.5) -> list[StreamBatch]:
    """Shuffle the target domain into ``n_batches`` chunks.

    Each chunk is divided into a calibration part and a disjoint test part;
    together the parts of all chunks cover the target exactly once, so a
    single batch spans the whole target.
    """
    if n_batches < 1:
        raise UsageError(f"need at least one batch, got {n_batches}")
    if n_batches > len(target) // 2:
        raise UsageError(f"{len(target)} examples cannot fill {n_batches} batches of >= 2")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x57EA])
    order = rng.permutation(len(target))
    batches = []
    for t, chunk in enumerate(np.array_split(order, n_batches)):
        n_test = min(max(1, int(round(test_fraction * len(chunk)))), len(chunk) - 1)
        batches.append(StreamBatch(t, target.subset(chunk[n_test:]), target.subset(chunk[:n_test])))
    return batches

"""QM9-style CSV ingestion, seeded sharding/splitting, target normalisation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .molgraph import MAX_ATOMS, MolGraph, SmilesError, parse_smiles

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("smiles", "mu", "homo")


class MissingColumn(ValueError):
    pass


class UnreadableFile(OSError):
    pass


class EmptyDataset(ValueError):
    pass


class DatasetTooSmall(ValueError):
    pass


class ZeroVariance(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    smiles: str
    mu: float
    homo: float
    graph: MolGraph = field(compare=False, repr=False)

    @property
    def targets(self) -> np.ndarray:
        return np.array([self.mu, self.homo])


class LoadResult(list):
    """List of records that also remembers how many rows were skipped."""

    def __init__(self, records=(), skipped: int = 0):
        super().__init__(records)
        self.skipped = skipped


def load_dataset(path: str | Path) -> LoadResult:
    """Read ``smiles,mu,homo`` rows; unparseable SMILES are skipped and counted."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise UnreadableFile(f"cannot open {path}: {exc}") from exc
    records, skipped = [], 0
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise MissingColumn(col)
        for row in reader:
            try:
                g = parse_smiles(row["smiles"])
                mu, homo = float(row["mu"]), float(row["homo"])
            except (SmilesError, ValueError, TypeError):
                skipped += 1
                continue
            if g.n > MAX_ATOMS or not (np.isfinite(mu) and np.isfinite(homo)):
                skipped += 1
                continue
            records.append(Record(row["smiles"].strip(), mu, homo, g))
    if skipped:
        log.warning("skipped %d unparseable rows in %s", skipped, path)
    if not records:
        raise EmptyDataset(f"no usable rows in {path}")
    return LoadResult(records, skipped)


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    collaborators: int = 2

    def __post_init__(self):
        if any(f <= 0 for f in self.fractions) or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1: {self.fractions}")
        if self.collaborators < 1:
            raise ValueError("need at least one collaborator")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _split_block(idx: np.ndarray, fractions) -> Split:
    n = len(idx)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return Split(idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])


def shuffled_indices(n: int, seed: int) -> np.ndarray:
    """Seeded Fisher-Yates permutation of ``range(n)``."""
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def shard_and_split(records: Sequence, spec: SplitSpec) -> list[Split]:
    """Contiguous equal shards of one shuffle (remainder to the last), each split 80/10/10."""
    n, k = len(records), spec.collaborators
    if n < 10 * k:
        raise DatasetTooSmall(f"{n} records cannot be split across {k} collaborators")
    idx = shuffled_indices(n, spec.seed)
    size = n // k
    shards = [idx[i * size:(i + 1) * size] for i in range(k - 1)] + [idx[(k - 1) * size:]]
    return [_split_block(s, spec.fractions) for s in shards]


def central_split(records: Sequence, spec: SplitSpec) -> Split:
    """Same shuffle, one shard: the pooled 80/10/10 split for centralized runs."""
    return shard_and_split(records, SplitSpec(spec.seed, spec.fractions, 1))[0]


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.std

    def invert(self, y):
        return np.asarray(y, dtype=float) * self.std + self.mean

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(np.zeros(2), np.ones(2))


def fit_normalizer(records: Sequence[Record]) -> Normalizer:
    if len(records) < 2:
        raise ValueError("need at least two records to fit a normalizer")
    y = np.stack([r.targets for r in records])
    std = y.std(axis=0)
    if np.any(std <= 0):
        raise ZeroVariance(f"constant target column(s): std={std}")
    return Normalizer(y.mean(axis=0), std)


def atom_count_histogram(records: Sequence) -> np.ndarray:
    """Empirical frequencies of heavy-atom counts; index k holds n = k + 1."""
    if not records:
        raise EmptyDataset("no records")
    counts = np.zeros(MAX_ATOMS)
    for r in records:
        g = r.graph if isinstance(r, Record) else r
        counts[g.n - 1] += 1
    return counts / counts.sum()

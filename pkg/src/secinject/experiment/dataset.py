from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .._rng import derive_rng
from ..errors import FamilyTooSmall, NoFamiliesFound

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    id: str
    family: str
    path: str
    size: int

    def read(self) -> bytes:
        with open(self.path, "rb") as fh:
            return fh.read()


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def families(self) -> list[str]:
        return sorted({s.family for s in self.samples})

    def by_family(self) -> dict[str, list[Sample]]:
        out: dict[str, list[Sample]] = {}
        for s in sorted(self.samples, key=lambda s: s.id):
            out.setdefault(s.family, []).append(s)
        return out

    def subset(self, samples) -> "Dataset":
        return Dataset(tuple(samples), self.warnings)


def load_dataset(root) -> Dataset:
    """One subdirectory per family; every regular file below it is a sample.

    Unreadable files are skipped with a warning, empty families dropped.
    """
    root = Path(root)
    if not root.is_dir():
        raise NoFamiliesFound(f"{root} is not a directory")
    samples, warnings = [], []
    for fam_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        found = []
        for dirpath, dirnames, filenames in os.walk(fam_dir):
            dirnames.sort()
            for name in sorted(filenames):
                path = Path(dirpath) / name
                if not path.is_file():
                    continue
                try:
                    with open(path, "rb") as fh:
                        size = len(fh.read())
                except OSError as exc:
                    msg = f"skipping unreadable file {path}: {exc.strerror or exc}"
                    log.warning(msg)
                    warnings.append(msg)
                    continue
                rel = path.relative_to(root).as_posix()
                found.append(Sample(rel, fam_dir.name, str(path), size))
        if not found:
            msg = f"dropping empty family {fam_dir.name}"
            log.warning(msg)
            warnings.append(msg)
            continue
        samples.extend(found)
    if not samples:
        raise NoFamiliesFound(f"no family directories with files under {root}")
    return Dataset(tuple(samples), tuple(warnings))


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    validation: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        parts = (self.train, self.validation, self.test)
        if any(p <= 0 for p in parts):
            raise ValueError("split fractions must be positive")
        if abs(sum(parts) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def _round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)).__floor__())


def split_counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """Train share is rounded half-up first; the remainder is split between
    validation and test the same way. Each part keeps at least one sample."""
    if n < 3:
        raise ValueError("need at least 3 samples")
    tr, va, te = (Fraction(str(p)) for p in (spec.train, spec.validation, spec.test))
    n_train = min(max(_round_half_up(n * tr), 1), n - 2)
    rest = n - n_train
    n_val = min(max(_round_half_up(rest * va / (va + te)), 1), rest - 1)
    return n_train, n_val, rest - n_val


def split_dataset(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified, seeded split into (train, validation, test)."""
    train, val, test = [], [], []
    for family, members in ds.by_family().items():
        if len(members) < 3:
            raise FamilyTooSmall(family, len(members))
        n_train, n_val, _ = split_counts(len(members), spec)
        rng = derive_rng("split", spec.seed, family)
        shuffled = [members[i] for i in rng.permutation(len(members))]
        train += shuffled[:n_train]
        val += shuffled[n_train:n_train + n_val]
        test += shuffled[n_train + n_val:]
    return ds.subset(train), ds.subset(val), ds.subset(test)

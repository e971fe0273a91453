"""Subject-grouped k-fold splitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from attnseg.errors import ConfigurationError


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    validation: tuple[str, ...]


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[Fold, ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i: int) -> Fold:
        return self.folds[i]


def split_kfold(subject_ids, k: int = 5, seed: int = 0) -> FoldSplit:
    """Shuffle subjects by ``seed`` and cut them into ``k`` validation groups.

    Group sizes differ by at most one. Each fold trains on every subject outside
    its validation group, so scans of one subject never straddle the split.
    """
    if k < 2:
        raise ConfigurationError(f"k-fold splitting needs k >= 2, got {k}")
    subjects = list(dict.fromkeys(str(s) for s in subject_ids))
    if len(subjects) < k:
        raise ConfigurationError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    groups = np.array_split(order, k)
    folds = []
    for g in groups:
        held = set(g.tolist())
        folds.append(
            Fold(
                train=tuple(subjects[i] for i in order if i not in held),
                validation=tuple(subjects[i] for i in g),
            )
        )
    return FoldSplit(tuple(folds))


def check_disjoint(fold: Fold) -> None:
    leaked = set(fold.train) & set(fold.validation)
    if leaked:
        raise AssertionError(f"subjects in both train and validation: {sorted(leaked)}")

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class FoldSplit:
    """Subject-level split for one cross-validation fold.

    ``valid_tail`` / ``test_tail`` are epoch fractions carved from the end of
    each training subject's recording; they are non-zero only when there are
    too few subjects to hold out whole ones.
    """

    fold_index: int
    train_subjects: tuple[str, ...]
    valid_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]
    valid_tail: float = 0.0
    test_tail: float = 0.0

    @property
    def within_subject(self) -> bool:
        return self.test_tail > 0


def _n_valid(n_train: int, fraction: float) -> int:
    if n_train < 2:
        return 0
    return min(n_train - 1, max(1, int(math.floor(fraction * n_train + 0.5))))


def make_folds(
    subjects: Iterable[str],
    k: int,
    scheme: str = "leave_one_subject_out",
    seed: int = 0,
    valid_fraction: float = 0.1,
) -> list[FoldSplit]:
    subjects = sorted(set(subjects))
    n = len(subjects)
    if n == 0:
        raise ValueError("no subjects")
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be between 1 and the subject count ({n})")
    rng = np.random.default_rng(seed)

    if n == 1:
        s = subjects[0]
        return [FoldSplit(0, (s,), (), (s,), valid_tail=valid_fraction, test_tail=0.2)]

    if scheme == "leave_one_subject_out":
        if k != n:
            raise ValueError(f"leave_one_subject_out needs k == subject count ({n}), got {k}")
        groups = [[s] for s in subjects]
    elif scheme == "grouped":
        perm = [subjects[i] for i in rng.permutation(n)]
        groups = [sorted(g) for g in np.array_split(np.array(perm, dtype=object), k)]
    else:
        raise ValueError(f"unknown fold scheme {scheme!r}")

    folds = []
    for i, test in enumerate(groups):
        rest = [s for s in subjects if s not in test]
        nv = _n_valid(len(rest), valid_fraction)
        picked = set(rng.choice(len(rest), size=nv, replace=False).tolist()) if nv else set()
        valid = tuple(sorted(rest[j] for j in picked))
        train = tuple(s for j, s in enumerate(rest) if j not in picked)
        folds.append(FoldSplit(i, train, valid, tuple(sorted(test)),
                               valid_tail=0.0 if nv else valid_fraction))
    return folds

"""Subject-exclusive cross-validation folds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    folds: tuple[tuple[int, ...], ...]

    def run(self, r: int) -> tuple[list[int], list[int], list[int]]:
        """(train, validation, test) identities of run ``r``.

        Test is fold r, validation is fold (r + 1) mod n, the rest train.
        """
        if not 0 <= r < self.n_folds:
            raise ValueError(f"run index {r} outside [0, {self.n_folds})")
        val = (r + 1) % self.n_folds
        train = [i for k, f in enumerate(self.folds) if k not in (r, val) for i in f]
        return sorted(train), sorted(self.folds[val]), sorted(self.folds[r])

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "folds": [list(f) for f in self.folds]}


def make_folds(identities, n_folds: int = 10, seed: int = 0) -> FoldPlan:
    ids = sorted(set(int(i) for i in identities))
    if n_folds < 3:
        raise ValueError(f"need at least 3 folds (train, validation, test), got {n_folds}")
    if len(ids) < n_folds:
        raise ValueError(f"{len(ids)} identities cannot fill {n_folds} folds")
    order = np.random.default_rng([seed, 31]).permutation(len(ids))
    folds = [[] for _ in range(n_folds)]
    for pos, j in enumerate(order):
        folds[pos % n_folds].append(ids[j])
    return FoldPlan(n_folds, tuple(tuple(sorted(f)) for f in folds))

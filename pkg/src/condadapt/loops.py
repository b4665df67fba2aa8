"""Small shared training-loop helpers."""

from __future__ import annotations

import numpy as np

from .params import ParamSet
from .rng import Rng


def epoch_minibatches(n: int, batch_size: int, rng: Rng):
    """Yield index arrays covering a shuffled epoch."""
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


class BestCheckpoint:
    """Track the best validation loss; stop after `patience` non-improvements."""

    def __init__(self, params: ParamSet, patience: int):
        self.params = params
        self.patience = patience
        self.best_loss = float("inf")
        self.best_arrays = {k: v.data.copy() for k, v in params.items()}
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        """Record one evaluation; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_arrays = {k: v.data.copy() for k, v in self.params.items()}
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience

    def restore(self) -> None:
        for name, t in self.params.items():
            t.data[...] = self.best_arrays[name]

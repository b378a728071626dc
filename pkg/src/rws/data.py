"""Containers for streamed observations."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidBatchError


def _as_vector(values, name):
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidBatchError(f"{name} must be one-dimensional")
    return arr


@dataclass(frozen=True)
class Batch:
    """One chunk of the stream: paired covariates and responses."""

    xs: np.ndarray
    ys: np.ndarray
    index: int = 1

    def __post_init__(self):
        xs = _as_vector(self.xs, "xs")
        ys = _as_vector(self.ys, "ys")
        if xs.size != ys.size:
            raise InvalidBatchError(f"xs has {xs.size} values but ys has {ys.size}")
        if xs.size == 0:
            raise InvalidBatchError("batch is empty")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise InvalidBatchError("batch contains non-finite values")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    def __len__(self):
        return self.xs.size


@dataclass(frozen=True)
class PooledDataset:
    """The whole stream retained in memory (used only by reference estimators)."""

    xs: np.ndarray
    ys: np.ndarray
    n: int = field(init=False)

    def __post_init__(self):
        xs = _as_vector(self.xs, "xs")
        ys = _as_vector(self.ys, "ys")
        if xs.size != ys.size:
            raise InvalidBatchError(f"xs has {xs.size} values but ys has {ys.size}")
        if xs.size == 0:
            raise InvalidBatchError("dataset is empty")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "n", xs.size)

    @classmethod
    def from_batches(cls, batches):
        batches = list(batches)
        if not batches:
            raise InvalidBatchError("no batches")
        return cls(np.concatenate([b.xs for b in batches]),
                   np.concatenate([b.ys for b in batches]))

    def __len__(self):
        return self.n

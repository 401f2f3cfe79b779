from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from qcodes.validators import Ints, Numbers
from qcodes.validators import Sequence as SequenceOf

from .common.errors import DatasetError, DomainError


@dataclass(frozen=True)
class TimeGrid:
    """Constraint times t_0 < t_1 < ... < t_k (model time, arbitrary spacing)."""

    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in np.asarray(self.times, dtype=float).reshape(-1))
        SequenceOf(Numbers(), require_sorted=True).validate(list(times), "times")
        if len(times) < 2:
            raise ValueError(f"a time grid needs at least 2 times, got {len(times)}")
        if not np.all(np.isfinite(times)):
            raise ValueError("times must be finite")
        if np.any(np.diff(times) <= 0):
            raise ValueError(f"times must be strictly increasing: {times}")
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[float]:
        return iter(self.times)

    @property
    def k(self) -> int:
        """Number of sub-intervals."""
        return len(self.times) - 1

    @property
    def t_start(self) -> float:
        return self.times[0]

    @property
    def t_end(self) -> float:
        return self.times[-1]

    @property
    def horizon(self) -> float:
        return self.times[-1] - self.times[0]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.times)

    def interval(self, i: int) -> tuple[float, float]:
        """(t_{i-1}, t_i) for 1 <= i <= k."""
        Ints(min_value=1).validate(i, "interval index")
        Ints(max_value=self.k).validate(i, "interval index")
        return self.times[i - 1], self.times[i]

    def intervals(self) -> list[tuple[float, float]]:
        return [self.interval(i) for i in range(1, self.k + 1)]

    def without(self, indices: Iterable[int]) -> TimeGrid:
        drop = set(indices)
        return TimeGrid(tuple(t for j, t in enumerate(self.times) if j not in drop))


def interval_indices(grid: TimeGrid, t, backward: bool = False) -> np.ndarray:
    """Vectorised interval_index.

    forward: i with t in [t_{i-1}, t_i); backward: i with t in (t_{i-1}, t_i].
    """
    t = np.asarray(t, dtype=float)
    times = grid.as_array()
    if backward:
        outside = (t <= times[0]) | (t > times[-1])
    else:
        outside = (t < times[0]) | (t >= times[-1])
    if np.any(outside) or not np.all(np.isfinite(t)):
        bad = t[outside] if np.any(outside) else t
        convention = "(t_0, t_k]" if backward else "[t_0, t_k)"
        raise DomainError(
            f"time {np.ravel(bad)[0]} outside {convention} = [{times[0]}, {times[-1]}]"
        )
    return np.searchsorted(times, t, side="left" if backward else "right")


def interval_index(grid: TimeGrid, t: float, backward: bool = False) -> int:
    return int(interval_indices(grid, t, backward))


def next_time(grid: TimeGrid, t: float) -> float:
    """min{u in grid : u > t}, defined for t_0 <= t < t_k."""
    return grid.times[interval_index(grid, t)]


def prev_time(grid: TimeGrid, t: float) -> float:
    """max{u in grid : u < t}, defined for t_0 < t <= t_k."""
    return grid.times[interval_index(grid, t, backward=True) - 1]


@dataclass(frozen=True, eq=False)
class Snapshot:
    time_index: int
    samples: np.ndarray

    def __post_init__(self):
        Ints(min_value=0).validate(self.time_index, "time_index")
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise DatasetError(f"snapshot {self.time_index} must be a non-empty (n, d) matrix, got {samples.shape}")
        bad = np.flatnonzero(~np.isfinite(samples).all(axis=1))
        if len(bad):
            raise DatasetError(f"snapshot {self.time_index} has non-finite values", row=int(bad[0]))
        object.__setattr__(self, "samples", samples)

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True, eq=False)
class MarginalDataset:
    """One empirical sample set per grid time.

    Snapshots listed in `holdout` stay in the container for evaluation but are
    dropped by `training_view()`.
    """

    grid: TimeGrid
    snapshots: tuple
    holdout: frozenset = frozenset()
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        snapshots = tuple(self.snapshots)
        if len(snapshots) != len(self.grid):
            raise DatasetError(f"{len(snapshots)} snapshots for {len(self.grid)} grid times")
        for j, snapshot in enumerate(snapshots):
            if snapshot.time_index != j:
                raise DatasetError(f"snapshot at position {j} has time_index {snapshot.time_index}")
        dims = {s.dim for s in snapshots}
        if len(dims) != 1:
            raise DatasetError(f"snapshots have different dimensions {sorted(dims)}")
        holdout = frozenset(int(j) for j in self.holdout)
        for j in holdout:
            Ints(0, len(self.grid) - 1).validate(j, "holdout index")
        if len(self.grid) - len(holdout) < 2:
            raise DatasetError("at least 2 snapshots must remain for training")
        object.__setattr__(self, "snapshots", snapshots)
        object.__setattr__(self, "holdout", holdout)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @classmethod
    def from_arrays(
        cls,
        times: Sequence[float],
        samples: Sequence[np.ndarray],
        holdout: Iterable[int] = (),
        metadata: Mapping = None,
    ) -> MarginalDataset:
        return cls(
            TimeGrid(tuple(times)),
            tuple(Snapshot(j, x) for j, x in enumerate(samples)),
            frozenset(holdout),
            metadata or {},
        )

    @property
    def dim(self) -> int:
        return self.snapshots[0].dim

    @property
    def sizes(self) -> list[int]:
        return [s.size for s in self.snapshots]

    def samples(self, j: int) -> np.ndarray:
        return self.snapshots[j].samples

    def with_holdout(self, *indices: int) -> MarginalDataset:
        return MarginalDataset(self.grid, self.snapshots, frozenset(indices), self.metadata)

    def training_view(self) -> MarginalDataset:
        """The dataset without its held-out times, snapshots re-indexed."""
        if not self.holdout:
            return self
        kept = [j for j in range(len(self.grid)) if j not in self.holdout]
        metadata = dict(self.metadata, source_indices=kept)
        return MarginalDataset.from_arrays(
            self.grid.without(self.holdout).times,
            [self.samples(j) for j in kept],
            metadata=metadata,
        )

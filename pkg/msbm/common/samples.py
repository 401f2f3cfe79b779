from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import DatasetError, DomainError, check_finite


@dataclass(frozen=True, eq=False)
class IntervalCoupling:
    """Row-aligned endpoint pairs for the sub-interval [t_{index-1}, t_index].

    Args:
        index: interval number, 1 <= index <= k
        left: (m, d) samples at t_{index-1}
        right: (m, d) samples at t_index
    """

    index: int
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        left = np.atleast_2d(np.asarray(self.left, dtype=float))
        right = np.atleast_2d(np.asarray(self.right, dtype=float))
        if left.shape != right.shape:
            raise ValueError(
                f"interval {self.index}: left {left.shape} and right {right.shape} must be row-aligned"
            )
        if len(left) < 1:
            raise ValueError(f"interval {self.index}: empty coupling")
        check_finite(left, f"coupling {self.index} left")
        check_finite(right, f"coupling {self.index} right")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def size(self) -> int:
        return len(self.left)

    @property
    def dim(self) -> int:
        return self.left.shape[1]


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """Simulated paths recorded at `times`; `states` has shape (len(times), batch, d).

    Times are strictly ascending for forward simulations and strictly
    descending for backward ones.
    """

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3 or states.shape[0] != len(times):
            raise ValueError(f"states {states.shape} do not match {len(times)} recorded times")
        if len(times) > 1:
            steps = np.diff(times)
            if not (np.all(steps > 0) or np.all(steps < 0)):
                raise ValueError("recorded times must be strictly monotone")
        check_finite(states, "trajectory states")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def batch(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def direction(self) -> str:
        if len(self.times) > 1 and self.times[1] < self.times[0]:
            return "backward"
        return "forward"

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def index(self, t: float, atol: float = 1e-9) -> int:
        hits = np.flatnonzero(np.abs(self.times - t) <= atol)
        if len(hits) == 0:
            raise DomainError(f"time {t} was not recorded")
        return int(hits[0])

    def at(self, t: float) -> np.ndarray:
        return self.states[self.index(t)]

    def to_csv(self, path: Union[str, Path], comment: Optional[str] = None) -> None:
        """Write columns `path_id, t, x0..x{d-1}`, one row per (path, time),
        below an optional `# comment` line."""
        n_times, batch, dim = self.states.shape
        path_id = np.repeat(np.arange(batch), n_times)
        t = np.tile(self.times, batch)
        x = self.states.transpose(1, 0, 2).reshape(-1, dim)
        header = ",".join(["path_id", "t"] + [f"x{j}" for j in range(dim)])
        if comment:
            header = f"# {comment}\n{header}"
        np.savetxt(
            path,
            np.column_stack([path_id, t, x]),
            fmt=["%d", "%.17g"] + ["%.17g"] * dim,
            delimiter=",",
            header=header,
            comments="",
        )

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> TrajectoryBatch:
        lines = [line for line in Path(path).read_text().splitlines() if not line.startswith("#")]
        table = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
        if table.shape[1] < 3:
            raise DatasetError("trajectory csv needs path_id, t and at least one coordinate", str(path))
        path_id = table[:, 0].astype(int)
        batch = int(path_id.max()) + 1
        n_times = len(table) // batch
        if n_times * batch != len(table):
            raise DatasetError("paths have unequal numbers of rows", str(path))
        times = table[:n_times, 1]
        states = table[:, 2:].reshape(batch, n_times, -1).transpose(1, 0, 2)
        return cls(times, states)

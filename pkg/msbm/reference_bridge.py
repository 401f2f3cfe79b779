"""Reference diffusion Q, its pinned (Brownian) bridges and the bridge score targets."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from qcodes.validators import Enum, Numbers

from .common.errors import DomainError, UnsupportedConfigurationError
from .common.samples import IntervalCoupling, TrajectoryBatch
from .time_grid import TimeGrid, interval_index

DRIFT_KINDS = ("zero", "affine")


@dataclass(frozen=True)
class ReferenceProcess:
    """dX = f_t(X) dt + sigma dW, with f_t(x) = drift_scale * x + drift_offset for
    drift = "affine" and f = 0 for drift = "zero".

    Closed-form bridges and score targets exist only for drift = "zero".
    """

    sigma: float = 1.0
    drift: str = "zero"
    drift_scale: float = 0.0
    drift_offset: float = 0.0

    def __post_init__(self):
        Numbers().validate(self.sigma, "sigma")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        Enum(*DRIFT_KINDS).validate(self.drift, "drift")
        Numbers().validate(self.drift_scale, "drift_scale")
        Numbers().validate(self.drift_offset, "drift_offset")

    @property
    def is_brownian(self) -> bool:
        return self.drift == "zero"

    def f(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.drift == "zero":
            return np.zeros_like(x)
        return self.drift_scale * x + self.drift_offset

    def require_brownian(self, operation: str) -> None:
        if not self.is_brownian:
            raise UnsupportedConfigurationError(
                f"{operation} has a closed form only for the drift-free reference, got drift={self.drift!r}"
            )

    def snapshot(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class BridgeQuery:
    t_left: float
    t_right: float
    x_left: np.ndarray
    x_right: np.ndarray
    t: float

    def __post_init__(self):
        x_left = np.atleast_1d(np.asarray(self.x_left, dtype=float))
        x_right = np.atleast_1d(np.asarray(self.x_right, dtype=float))
        if x_left.shape != x_right.shape:
            raise ValueError(f"endpoint shapes differ: {x_left.shape} vs {x_right.shape}")
        if not (np.all(np.isfinite(x_left)) and np.all(np.isfinite(x_right))):
            raise ValueError("bridge endpoints must be finite")
        if not self.t_left < self.t < self.t_right:
            raise DomainError(f"t={self.t} is not strictly inside ({self.t_left}, {self.t_right})")
        object.__setattr__(self, "x_left", x_left)
        object.__setattr__(self, "x_right", x_right)


def _column(values, like: np.ndarray):
    # per-sample scalars broadcast against (n, d) rows
    values = np.asarray(values, dtype=float)
    if values.ndim == 1 and np.ndim(like) == 2:
        return values[:, None]
    return values


def bridge_moments(x_left, x_right, t_left, t_right, t, sigma: float):
    """Mean and isotropic variance of the Brownian bridge pinned at
    (t_left, x_left) and (t_right, x_right), evaluated at t. Vectorised over rows.
    """
    x_left = np.asarray(x_left, dtype=float)
    x_right = np.asarray(x_right, dtype=float)
    t_left = np.asarray(t_left, dtype=float)
    t_right = np.asarray(t_right, dtype=float)
    t = np.asarray(t, dtype=float)
    length = t_right - t_left
    s = (t - t_left) / length
    mean = (1 - _column(s, x_left)) * x_left + _column(s, x_left) * x_right
    var = sigma**2 * (t - t_left) * (t_right - t) / length
    return mean, var


def bridge_mean_var(q: BridgeQuery, ref: ReferenceProcess) -> tuple[np.ndarray, float]:
    ref.require_brownian("bridge_mean_var")
    mean, var = bridge_moments(q.x_left, q.x_right, q.t_left, q.t_right, q.t, ref.sigma)
    return mean, float(var)


def sample_bridge(q: BridgeQuery, ref: ReferenceProcess, rng: np.random.Generator) -> np.ndarray:
    mean, var = bridge_mean_var(q, ref)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def sample_bridges(x_left, x_right, t_left, t_right, t, ref: ReferenceProcess, rng: np.random.Generator):
    """Batch form of sample_bridge: one bridge draw per row of (x_left, x_right)."""
    ref.require_brownian("sample_bridges")
    mean, var = bridge_moments(x_left, x_right, t_left, t_right, t, ref.sigma)
    return mean + np.sqrt(_column(np.maximum(var, 0.0), mean)) * rng.standard_normal(mean.shape)


def forward_score_target(x_t, x_next, t, t_next, ref: ReferenceProcess) -> np.ndarray:
    """sigma * grad_{x_t} log Q(x_next | x_t) = (x_next - x_t) / (sigma (t_next - t))."""
    ref.require_brownian("forward_score_target")
    x_t = np.asarray(x_t, dtype=float)
    delta = np.asarray(t_next, dtype=float) - np.asarray(t, dtype=float)
    if np.any(delta <= 0):
        raise DomainError("forward target needs t < t_next")
    return (np.asarray(x_next, dtype=float) - x_t) / (ref.sigma * _column(delta, x_t))


def backward_score_target(x_t, x_prev, t, t_prev, ref: ReferenceProcess) -> np.ndarray:
    """sigma * grad_{x_t} log Q(x_t | x_prev) = (x_prev - x_t) / (sigma (t - t_prev))."""
    ref.require_brownian("backward_score_target")
    x_t = np.asarray(x_t, dtype=float)
    delta = np.asarray(t, dtype=float) - np.asarray(t_prev, dtype=float)
    if np.any(delta <= 0):
        raise DomainError("backward target needs t > t_prev")
    return (np.asarray(x_prev, dtype=float) - x_t) / (ref.sigma * _column(delta, x_t))


def sample_reciprocal_path(
    couplings: Sequence[IntervalCoupling],
    grid: TimeGrid,
    query_times: Sequence[float],
    ref: ReferenceProcess,
    rng: np.random.Generator,
    n_paths: Optional[int] = None,
) -> TrajectoryBatch:
    """Sample the mixture of bridges P_T prod_i Q_{|t_{i-1}, t_i} at `query_times`.

    Row r of every interval coupling forms path r; couplings larger than
    `n_paths` (default: the smallest coupling) are subsampled without
    replacement. Given the couplings, segments in different intervals are
    drawn independently. Grid times return the coupling endpoints verbatim.
    """
    ref.require_brownian("sample_reciprocal_path")
    if len(couplings) != grid.k:
        raise ValueError(f"{len(couplings)} couplings for {grid.k} intervals")
    for i, coupling in enumerate(couplings, start=1):
        assert coupling.index == i, f"coupling {coupling.index} found at position {i}"
    times = np.unique(np.asarray(query_times, dtype=float))
    if times.size == 0:
        raise DomainError("no query times given")
    if times[0] < grid.t_start or times[-1] > grid.t_end:
        raise DomainError(f"query times must lie in [{grid.t_start}, {grid.t_end}]")

    if n_paths is None:
        n_paths = min(c.size for c in couplings)
    rows = []
    for coupling in couplings:
        if coupling.size == n_paths:
            rows.append(np.arange(n_paths))
        else:
            rows.append(rng.choice(coupling.size, n_paths, replace=coupling.size < n_paths))

    grid_times = grid.as_array()
    states = []
    for t in times:
        on_grid = np.flatnonzero(grid_times == t)
        if len(on_grid) and on_grid[0] == 0:
            states.append(couplings[0].left[rows[0]])
        elif len(on_grid):
            j = int(on_grid[0])
            states.append(couplings[j - 1].right[rows[j - 1]])
        else:
            i = interval_index(grid, t)
            t_left, t_right = grid.interval(i)
            coupling = couplings[i - 1]
            states.append(
                sample_bridges(
                    coupling.left[rows[i - 1]], coupling.right[rows[i - 1]], t_left, t_right, t, ref, rng
                )
            )
    return TrajectoryBatch(times, np.stack(states))

"""Euler-Maruyama simulation of the controlled forward and backward SDEs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from qcodes.validators import Bool, Ints, Numbers
from qcodes.validators import Sequence as SequenceOf

from .common.errors import DivergenceError, DomainError
from .common.samples import TrajectoryBatch
from .reference_bridge import ReferenceProcess
from .time_grid import MarginalDataset

__all__ = [
    "SimConfig",
    "TrajectoryBatch",
    "simulate_forward",
    "simulate_backward",
    "simulate",
    "rollout_full",
]

logger = logging.getLogger(__name__)

Control = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SimConfig:
    """
    Args:
        steps_per_interval: Euler-Maruyama steps between consecutive grid times
        record_times: extra times at which states are recorded (inserted into the mesh)
        seed: seed of the noise stream when no generator is passed
        record_steps: record every mesh point instead of only grid and record times
    """

    steps_per_interval: int = 30
    record_times: tuple = ()
    seed: Optional[int] = 0
    record_steps: bool = False

    def __post_init__(self):
        Ints(min_value=1).validate(self.steps_per_interval, "steps_per_interval")
        record_times = tuple(float(t) for t in self.record_times)
        SequenceOf(Numbers()).validate(list(record_times), "record_times")
        if self.seed is not None:
            Ints(min_value=0).validate(self.seed, "seed")
        Bool().validate(self.record_steps, "record_steps")
        object.__setattr__(self, "record_times", record_times)

    def snapshot(self) -> dict:
        return dict(
            steps_per_interval=self.steps_per_interval,
            record_times=list(self.record_times),
            seed=self.seed,
            record_steps=self.record_steps,
        )

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        d = dict(d)
        d["record_times"] = tuple(d.get("record_times", ()))
        return cls(**d)

    def within(self, t_start: float, t_end: float) -> SimConfig:
        """Copy keeping only the record times inside [t_start, t_end] (either orientation)."""
        lo, hi = min(t_start, t_end), max(t_start, t_end)
        return replace(self, record_times=tuple(t for t in self.record_times if lo <= t <= hi))


def _mesh(t_start: float, t_end: float, steps: int, record_times, record_steps: bool):
    """Uniform mesh from t_start to t_end (either orientation) with the record
    times inserted; returns the mesh and a mask of recorded points."""
    lo, hi = min(t_start, t_end), max(t_start, t_end)
    outside = [t for t in record_times if not lo <= t <= hi]
    if outside:
        raise DomainError(f"record times {outside} outside the simulated span [{lo}, {hi}]")
    uniform = np.linspace(t_start, t_end, steps + 1)
    extra = np.array([t for t in record_times if lo < t < hi], dtype=float)
    mesh = np.unique(np.concatenate([uniform, extra]))
    if t_start > t_end:
        mesh = mesh[::-1]
    if record_steps:
        return mesh, np.ones(len(mesh), dtype=bool)
    recorded = np.isin(mesh, extra)
    recorded[[0, -1]] = True
    return mesh, recorded


def _integrate(step: Callable, x: np.ndarray, mesh: np.ndarray, recorded: np.ndarray, sigma: float, rng):
    states = [x.copy()] if recorded[0] else []
    for m in range(len(mesh) - 1):
        t, t_next = mesh[m], mesh[m + 1]
        dt = abs(t_next - t)
        x = x + step(t, x) * dt + sigma * np.sqrt(dt) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite state", step=m, t_range=(min(t, t_next), max(t, t_next)))
        if recorded[m + 1]:
            states.append(x.copy())
    return TrajectoryBatch(mesh[recorded], np.stack(states))


def _start(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not np.all(np.isfinite(x)):
        raise ValueError("initial states must be finite")
    return x.copy()


def simulate_forward(
    ctrl: Control,
    x0: np.ndarray,
    t_start: float,
    t_end: float,
    cfg: SimConfig,
    ref: ReferenceProcess,
    rng: Optional[np.random.Generator] = None,
) -> TrajectoryBatch:
    """dX = (f(t, X) + sigma v(t, X)) dt + sigma dW from t_start up to t_end."""
    if not t_start < t_end:
        raise DomainError(f"forward simulation needs t_start < t_end, got {t_start} -> {t_end}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    mesh, recorded = _mesh(t_start, t_end, cfg.steps_per_interval, cfg.record_times, cfg.record_steps)
    sigma = ref.sigma

    def step(t, x):
        return ref.f(t, x) + sigma * ctrl(t, x)

    return _integrate(step, _start(x0), mesh, recorded, sigma, rng)


def simulate_backward(
    ctrl: Control,
    xT: np.ndarray,
    t_start: float,
    t_end: float,
    cfg: SimConfig,
    ref: ReferenceProcess,
    rng: Optional[np.random.Generator] = None,
) -> TrajectoryBatch:
    """Steps the clock down from t_start to t_end < t_start:
    x <- x + (sigma u(t, x) - f(t, x)) dt + sigma sqrt(dt) z."""
    if not t_start > t_end:
        raise DomainError(f"backward simulation needs t_start > t_end, got {t_start} -> {t_end}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    mesh, recorded = _mesh(t_start, t_end, cfg.steps_per_interval, cfg.record_times, cfg.record_steps)
    sigma = ref.sigma

    def step(t, x):
        return sigma * ctrl(t, x) - ref.f(t, x)

    return _integrate(step, _start(xT), mesh, recorded, sigma, rng)


def simulate(ctrl: Control, x, t_start: float, t_end: float, cfg: SimConfig, ref: ReferenceProcess, rng=None):
    """simulate_forward or simulate_backward, chosen by the orientation of [t_start, t_end]."""
    if t_start < t_end:
        return simulate_forward(ctrl, x, t_start, t_end, cfg, ref, rng)
    return simulate_backward(ctrl, x, t_start, t_end, cfg, ref, rng)


def rollout_full(
    ctrl: Control,
    dataset: MarginalDataset,
    direction: str,
    cfg: SimConfig,
    ref: ReferenceProcess,
    x_start: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> TrajectoryBatch:
    """One continuous rollout over the whole grid with a single shared control.

    Starts from the first snapshot (forward) or the last one (backward) unless
    `x_start` is given; records every grid time plus `cfg.record_times`. The
    state at an interior grid time is carried over unchanged into the next
    interval.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    grid = dataset.grid
    if len(cfg.within(grid.t_start, grid.t_end).record_times) != len(cfg.record_times):
        raise DomainError(f"record times must lie in [{grid.t_start}, {grid.t_end}]")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if direction == "forward":
        x = dataset.samples(0) if x_start is None else x_start
        spans = grid.intervals()
    else:
        x = dataset.samples(len(grid) - 1) if x_start is None else x_start
        spans = [(right, left) for left, right in reversed(grid.intervals())]

    times, states = [], []
    for a, b in spans:
        piece = simulate(ctrl, x, a, b, cfg.within(a, b), ref, rng)
        skip = 1 if times else 0
        times.extend(piece.times[skip:])
        states.extend(piece.states[skip:])
        x = piece.final
    logger.debug("%s rollout over %d intervals, %d recorded times", direction, len(spans), len(times))
    return TrajectoryBatch(np.asarray(times), np.stack(states))

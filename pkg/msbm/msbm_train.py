"""Multi-marginal bridge matching by iterative Markovian fitting.

Each outer iteration fits the backward control u on bridges drawn from the
current interval couplings, refreshes the couplings by simulating u down every
interval from data, then does the same for the forward control v. The naive
baseline refreshes from one global rollout instead of re-anchoring at every
snapshot.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from qcodes.validators import Bool, Enum, Ints, Numbers
from tqdm import trange

from .common.errors import DivergenceError, TrainingAborted
from .common.samples import IntervalCoupling
from .control_net import (
    ACTIVATIONS,
    Architecture,
    ControlFunction,
    RegressionBatch,
    TrainerState,
    apply_update,
    ema_swap,
    loss_and_grad,
    save_checkpoint,
)
from .metrics import wasserstein_exact
from .reference_bridge import (
    ReferenceProcess,
    backward_score_target,
    forward_score_target,
    sample_bridges,
)
from .sde_sim import SimConfig, rollout_full, simulate_backward, simulate_forward
from .time_grid import MarginalDataset, TimeGrid, interval_indices

__all__ = [
    "IntervalCoupling",
    "MsbmConfig",
    "MsbmTrainer",
    "TRAINING_PRESETS",
    "TrainReport",
    "init_couplings",
    "make_training_batch",
    "refresh_couplings",
    "run_msbm",
    "run_naive_baseline",
    "run_two_marginal",
]

logger = logging.getLogger(__name__)

MODES = ("msbm", "naive")
DIRECTIONS = ("forward", "backward")
PHASES = ("fit_backward", "refresh_backward", "fit_forward", "refresh_forward", "metrics")
ENDPOINT_GUARD = 1e-6  # relative to the interval length

# rng stream keys: default_rng([seed, iteration, interval, stream])
_STREAM_INIT, _STREAM_FORWARD_NET, _STREAM_BACKWARD_NET = 0, 1, 2
_STREAM = {phase: 10 + n for n, phase in enumerate(PHASES)}

# learning rate, outer iterations N, inner steps S, steps per interval, batch size and network size;
# the horizon T (petal 4, hesc 5, eb 4, cite/multi 3) belongs to the dataset grid.
# hidden 544 x depth 2 is ~1.2-1.3M parameters per control at d = 2..100, hidden 72 x depth 2 ~24k at d = 5
_LARGE = dict(hidden=544, depth=2)
_SMALL = dict(hidden=72, depth=2)


def _preset(lr: float, outer: int, inner: int, steps: int, network: dict) -> dict:
    return dict(
        learning_rate=lr, outer_iterations=outer, inner_steps=inner, steps_per_interval=steps, batch_size=256, **network
    )


TRAINING_PRESETS = {
    "petal": _preset(1e-3, 20, 1000, 30, _LARGE),
    "hesc": _preset(1e-3, 100, 1000, 30, _SMALL),
    "eb100": _preset(2e-4, 10, 1000, 100, _LARGE),
    "eb5": _preset(2e-4, 3, 50000, 100, _SMALL),
    "cite": _preset(1e-4, 50, 2000, 100, _LARGE),
    "multi": _preset(1e-4, 50, 2000, 100, _LARGE),
}


@dataclass(frozen=True)
class MsbmConfig:
    outer_iterations: int = 20
    inner_steps: int = 1000
    batch_size: int = 256
    sigma: float = 1.0
    learning_rate: float = 1e-3
    steps_per_interval: int = 30
    seed: int = 0
    mode: str = "msbm"
    hidden: int = 64
    depth: int = 2
    embedding: int = 32
    activation: str = "silu"
    ema_decay: float = 0.999
    ema_for_refresh: bool = False  # simulate refreshes with the EMA control
    threads: int = 1
    track_metrics: bool = True
    metric_samples: int = 500
    holdout: tuple = ()
    progress: bool = False

    def __post_init__(self):
        Ints(min_value=1).validate(self.outer_iterations, "outer_iterations")
        Ints(min_value=1).validate(self.inner_steps, "inner_steps")
        Ints(min_value=1).validate(self.batch_size, "batch_size")
        Numbers(min_value=0).validate(self.sigma, "sigma")
        Numbers(min_value=0).validate(self.learning_rate, "learning_rate")
        if not (self.sigma > 0 and self.learning_rate > 0):
            raise ValueError("sigma and learning_rate must be positive")
        Ints(min_value=1).validate(self.steps_per_interval, "steps_per_interval")
        Ints(min_value=0).validate(self.seed, "seed")
        Enum(*MODES).validate(self.mode, "mode")
        Enum(*ACTIVATIONS).validate(self.activation, "activation")
        Numbers(0, 1).validate(self.ema_decay, "ema_decay")
        Bool().validate(self.ema_for_refresh, "ema_for_refresh")
        Ints(min_value=1).validate(self.threads, "threads")
        Bool().validate(self.track_metrics, "track_metrics")
        Ints(min_value=1).validate(self.metric_samples, "metric_samples")
        Bool().validate(self.progress, "progress")
        object.__setattr__(self, "holdout", tuple(int(j) for j in self.holdout))

    @classmethod
    def from_dict(cls, d: dict) -> MsbmConfig:
        """Config from a document section; `"preset": name` fills in a TRAINING_PRESETS row first."""
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            Enum(*TRAINING_PRESETS).validate(preset, "preset")
            d = {**TRAINING_PRESETS[preset], **d}
        if "holdout" in d:
            d["holdout"] = tuple(d["holdout"])
        return cls(**d)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["holdout"] = list(self.holdout)
        return d

    def architecture(self, dim: int) -> Architecture:
        return Architecture(dim, self.hidden, self.depth, self.embedding, self.activation)

    def reference(self) -> ReferenceProcess:
        return ReferenceProcess(sigma=self.sigma)

    def sim_config(self, seed: Optional[int] = None) -> SimConfig:
        return SimConfig(self.steps_per_interval, seed=self.seed if seed is None else seed)


@dataclass
class TrainReport:
    """Loss curves (one list of inner-step losses per outer iteration),
    per-marginal W2 of a forward rollout after every outer iteration
    (entry 0: untrained controls) and wall-clock seconds per phase."""

    mode: str
    marginal_times: list = field(default_factory=list)
    forward_loss: list = field(default_factory=list)
    backward_loss: list = field(default_factory=list)
    marginal_w2: list = field(default_factory=list)
    phase_seconds: dict = field(default_factory=lambda: {phase: [] for phase in PHASES})
    iterations_completed: int = 0
    aborted: Optional[str] = None

    def mean_loss(self, direction: str) -> list[float]:
        curves = self.forward_loss if direction == "forward" else self.backward_loss
        return [float(np.mean(c)) for c in curves if len(c)]

    def w2_curve(self, position: int) -> np.ndarray:
        """W2 over iterations at marginal_times[position]."""
        return np.array([row[position] for row in self.marginal_w2])

    @staticmethod
    def moving_average(values: Sequence[float], window: int = 3) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if len(values) < window:
            return values.copy()
        return np.convolve(values, np.ones(window) / window, mode="valid")

    def total_seconds(self) -> float:
        return float(sum(sum(v) for v in self.phase_seconds.values()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_seconds"] = self.total_seconds()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainReport:
        d = {k: v for k, v in d.items() if k != "total_seconds"}
        return cls(**d)


def init_couplings(dataset: MarginalDataset, rng: np.random.Generator) -> list[IntervalCoupling]:
    """Independent pairing: m = min(n_{i-1}, n_i) rows drawn without replacement on each side."""
    couplings = []
    for i in range(1, dataset.grid.k + 1):
        left, right = dataset.samples(i - 1), dataset.samples(i)
        m = min(len(left), len(right))
        couplings.append(
            IntervalCoupling(
                i,
                left[rng.choice(len(left), m, replace=False)],
                right[rng.choice(len(right), m, replace=False)],
            )
        )
    return couplings


def _near_singular_end(grid: TimeGrid, t: np.ndarray, direction: str) -> np.ndarray:
    times = grid.as_array()
    if direction == "forward":
        i = np.minimum(np.searchsorted(times, t, side="right"), len(times) - 1)
        gap = times[i] - t
    else:
        i = np.maximum(np.searchsorted(times, t, side="left"), 1)
        gap = t - times[i - 1]
    return gap < ENDPOINT_GUARD * (times[i] - times[i - 1])


def sample_times(grid: TimeGrid, n: int, direction: str, rng: np.random.Generator) -> np.ndarray:
    """t ~ Uniform[t_0, t_k], redrawn while within the guard of the singular interval end."""
    t = rng.uniform(grid.t_start, grid.t_end, n)
    bad = _near_singular_end(grid, t, direction)
    while bad.any():
        t[bad] = rng.uniform(grid.t_start, grid.t_end, int(bad.sum()))
        bad = _near_singular_end(grid, t, direction)
    return t


def _map(fn: Callable, items, pool: Optional[ThreadPoolExecutor]) -> list:
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


def make_training_batch(
    couplings: Sequence[IntervalCoupling],
    grid: TimeGrid,
    ref: ReferenceProcess,
    batch_size: int,
    direction: str,
    rng: np.random.Generator,
    t: Optional[np.ndarray] = None,
    pool: Optional[ThreadPoolExecutor] = None,
) -> list[RegressionBatch]:
    """Regression samples (t, x_t, target), one chunk per interval in interval order.

    Times come from `rng` (or `t`); each interval then draws its coupling rows
    and bridge points from its own child stream, so the chunks can be built
    in parallel without changing the result.
    """
    Enum(*DIRECTIONS).validate(direction, "direction")
    ref.require_brownian("make_training_batch")
    assert len(couplings) == grid.k, "one coupling per interval"
    t = sample_times(grid, batch_size, direction, rng) if t is None else np.asarray(t, dtype=float)
    which = interval_indices(grid, t, backward=direction == "backward")
    child_seeds = rng.integers(0, 2**63 - 1, size=grid.k)

    def chunk(i: int) -> RegressionBatch:
        r = np.random.default_rng(child_seeds[i - 1])
        t_i = t[which == i]
        coupling = couplings[i - 1]
        rows = r.integers(coupling.size, size=len(t_i))
        x_left, x_right = coupling.left[rows], coupling.right[rows]
        t_left, t_right = grid.interval(i)
        x_t = sample_bridges(x_left, x_right, t_left, t_right, t_i, ref, r)
        if direction == "forward":
            target = forward_score_target(x_t, x_right, t_i, t_right, ref)
        else:
            target = backward_score_target(x_t, x_left, t_i, t_left, ref)
        return RegressionBatch(t_i, x_t, target)

    return _map(chunk, range(1, grid.k + 1), pool)


def _data_rows(samples: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    if m == len(samples):
        return samples[rng.permutation(m)]
    return samples[rng.choice(len(samples), m, replace=False)]


def refresh_couplings(
    ctrl: ControlFunction,
    dataset: MarginalDataset,
    direction: str,
    cfg: MsbmConfig,
    ref: ReferenceProcess,
    iteration: int = 0,
    pool: Optional[ThreadPoolExecutor] = None,
) -> list[IntervalCoupling]:
    """New couplings from simulating `ctrl`.

    msbm: every interval independently, forward from data at t_{i-1} (data
    left, simulated right) or backward from data at t_i (simulated left, data
    right). naive: one rollout over the whole grid from the first (last)
    snapshot, endpoints read off the simulated path.
    """
    Enum(*DIRECTIONS).validate(direction, "direction")
    grid = dataset.grid
    sim_cfg = cfg.sim_config()
    stream = _STREAM[f"refresh_{direction}"]

    if cfg.mode == "naive":
        anchor = 1 if direction == "forward" else grid.k
        rng = np.random.default_rng([cfg.seed, iteration, anchor, stream])
        start = 0 if direction == "forward" else grid.k
        x = _data_rows(dataset.samples(start), min(dataset.sizes), rng)
        path = rollout_full(ctrl, dataset, direction, sim_cfg, ref, x_start=x, rng=rng)
        return [IntervalCoupling(i, path.at(grid.times[i - 1]), path.at(grid.times[i])) for i in range(1, grid.k + 1)]

    def local(i: int) -> IntervalCoupling:
        rng = np.random.default_rng([cfg.seed, iteration, i, stream])
        left, right = dataset.samples(i - 1), dataset.samples(i)
        m = min(len(left), len(right))
        t_left, t_right = grid.interval(i)
        if direction == "forward":
            x = _data_rows(left, m, rng)
            return IntervalCoupling(i, x, simulate_forward(ctrl, x, t_left, t_right, sim_cfg, ref, rng).final)
        x = _data_rows(right, m, rng)
        return IntervalCoupling(i, simulate_backward(ctrl, x, t_right, t_left, sim_cfg, ref, rng).final, x)

    return _map(local, range(1, grid.k + 1), pool)


class MsbmTrainer:
    """
    Stateful form of run_msbm / run_naive_baseline.

    Args:
        dataset: marginals to fit; snapshots in `dataset.holdout` or
            `cfg.holdout` are left out of training
        cfg: training configuration
        on_iteration: called with the trainer after every outer iteration
    """

    def __init__(
        self,
        dataset: MarginalDataset,
        cfg: MsbmConfig,
        on_iteration: Optional[Callable[[MsbmTrainer], None]] = None,
    ):
        self.cfg = cfg
        self.source = dataset
        self.dataset = dataset.with_holdout(*(set(dataset.holdout) | set(cfg.holdout))).training_view()
        self.grid = self.dataset.grid
        self.ref = cfg.reference()
        self.on_iteration = on_iteration

        arch = cfg.architecture(self.dataset.dim)
        self.forward_ctrl = ControlFunction(arch, role="forward", rng=self._rng(0, 0, _STREAM_FORWARD_NET))
        self.backward_ctrl = ControlFunction(arch, role="backward", rng=self._rng(0, 0, _STREAM_BACKWARD_NET))
        self.forward_state = TrainerState.for_control(self.forward_ctrl, cfg.learning_rate, cfg.ema_decay)
        self.backward_state = TrainerState.for_control(self.backward_ctrl, cfg.learning_rate, cfg.ema_decay)

        self.couplings = init_couplings(self.dataset, self._rng(0, 0, _STREAM_INIT))
        self.iteration = 0
        self.report = TrainReport(mode=cfg.mode, marginal_times=list(self.grid.times[1:]))
        self._pool: Optional[ThreadPoolExecutor] = None

    def _rng(self, iteration: int, interval: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, iteration, interval, stream])

    @contextmanager
    def _timed(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.report.phase_seconds[phase].append(time.perf_counter() - start)

    def _control_and_state(self, direction: str) -> tuple[ControlFunction, TrainerState]:
        if direction == "forward":
            return self.forward_ctrl, self.forward_state
        return self.backward_ctrl, self.backward_state

    def ema_controls(self) -> tuple[ControlFunction, ControlFunction]:
        return ema_swap(self.forward_ctrl, self.forward_state), ema_swap(self.backward_ctrl, self.backward_state)

    def _fit(self, direction: str) -> list[float]:
        ctrl, state = self._control_and_state(direction)
        cfg = self.cfg
        rng = self._rng(self.iteration, 0, _STREAM[f"fit_{direction}"])
        losses = []
        steps = trange(
            cfg.inner_steps,
            desc=f"iteration {self.iteration} {direction}",
            disable=not cfg.progress,
            leave=False,
        )
        for _ in steps:
            chunks = make_training_batch(self.couplings, self.grid, self.ref, cfg.batch_size, direction, rng, pool=self._pool)
            parts = _map(lambda c: loss_and_grad(ctrl, c, normalizer=cfg.batch_size), chunks, self._pool)
            loss = 0.0
            grad = np.zeros_like(ctrl.params)
            for part_loss, part_grad in parts:
                loss += part_loss
                grad += part_grad
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite {direction} loss", step=state.step, t_range=RegressionBatch.concat(chunks).t_range
                )
            apply_update(ctrl, grad, state)
            losses.append(loss)
        return losses

    def _refresh(self, direction: str) -> None:
        ctrl, state = self._control_and_state(direction)
        if self.cfg.ema_for_refresh:
            ctrl = ema_swap(ctrl, state)
        self.couplings = refresh_couplings(
            ctrl, self.dataset, direction, self.cfg, self.ref, iteration=self.iteration, pool=self._pool
        )

    def fit_backward(self) -> list[float]:
        with self._timed("fit_backward"):
            losses = self._fit("backward")
        self.report.backward_loss.append(losses)
        return losses

    def refresh_backward(self) -> None:
        with self._timed("refresh_backward"):
            self._refresh("backward")

    def fit_forward(self) -> list[float]:
        with self._timed("fit_forward"):
            losses = self._fit("forward")
        self.report.forward_loss.append(losses)
        return losses

    def refresh_forward(self) -> None:
        with self._timed("refresh_forward"):
            self._refresh("forward")

    def marginal_fit(self) -> list[float]:
        """W2 between a forward EMA rollout from t_0 and every later training snapshot."""
        cfg = self.cfg
        rng = self._rng(self.iteration, 0, _STREAM["metrics"])
        v, _ = self.ema_controls()
        x0 = self.dataset.samples(0)
        x0 = x0[rng.choice(len(x0), min(len(x0), cfg.metric_samples), replace=False)]
        path = rollout_full(v, self.dataset, "forward", cfg.sim_config(), self.ref, x_start=x0, rng=rng)
        return [
            wasserstein_exact(path.at(t), self.dataset.samples(j), p=2, max_samples=cfg.metric_samples, seed=cfg.seed)
            for j, t in enumerate(self.grid.times[1:], start=1)
        ]

    def _track(self) -> None:
        if self.cfg.track_metrics:
            with self._timed("metrics"):
                self.report.marginal_w2.append(self.marginal_fit())

    def step(self) -> None:
        """One outer iteration: u then v, each followed by its coupling refresh."""
        self.iteration += 1
        self.fit_backward()
        self.refresh_backward()
        self.fit_forward()
        self.refresh_forward()
        self.report.iterations_completed = self.iteration
        self._track()
        logger.info(
            "%s iteration %d/%d: backward loss %.4g, forward loss %.4g%s",
            self.cfg.mode,
            self.iteration,
            self.cfg.outer_iterations,
            np.mean(self.report.backward_loss[-1]),
            np.mean(self.report.forward_loss[-1]),
            f", W2 {np.round(self.report.marginal_w2[-1], 4).tolist()}" if self.report.marginal_w2 else "",
        )
        if self.on_iteration is not None:
            self.on_iteration(self)

    def run(self) -> tuple[ControlFunction, ControlFunction, TrainReport]:
        cfg = self.cfg
        if self.cfg.threads > 1:
            self._pool = ThreadPoolExecutor(max_workers=cfg.threads)
        try:
            if self.iteration == 0 and not self.report.marginal_w2:
                self._track()
            while self.iteration < cfg.outer_iterations:
                self.step()
        except DivergenceError as e:
            self.report.aborted = str(e)
            logger.error("training aborted at iteration %d: %s", self.iteration, e)
            raise TrainingAborted(str(e), self.report) from e
        finally:
            if self._pool is not None:
                self._pool.shutdown()
                self._pool = None
        v, u = self.ema_controls()
        return v, u, self.report

    def metadata(self) -> dict:
        return dict(
            mode=self.cfg.mode,
            iteration=self.iteration,
            times=list(self.grid.times),
            source_times=list(self.source.grid.times),
            holdout=sorted(set(self.source.holdout) | set(self.cfg.holdout)),
            sigma=self.cfg.sigma,
            config=self.cfg.snapshot(),
            seconds=self.report.total_seconds(),
        )

    def save(self, path: Union[str, Path], **meta) -> Path:
        return save_checkpoint(
            path,
            {"forward": (self.forward_ctrl, self.forward_state), "backward": (self.backward_ctrl, self.backward_state)},
            {**self.metadata(), **meta},
        )


def run_msbm(
    dataset: MarginalDataset, cfg: MsbmConfig, on_iteration: Optional[Callable] = None
) -> tuple[ControlFunction, ControlFunction, TrainReport]:
    """Returns the EMA forward control v, the EMA backward control u and the report."""
    if cfg.mode != "msbm":
        raise ValueError(f"run_msbm needs mode='msbm', got {cfg.mode!r}")
    return MsbmTrainer(dataset, cfg, on_iteration).run()


def run_naive_baseline(
    dataset: MarginalDataset, cfg: MsbmConfig, on_iteration: Optional[Callable] = None
) -> tuple[ControlFunction, ControlFunction, TrainReport]:
    if cfg.mode != "naive":
        raise ValueError(f"run_naive_baseline needs mode='naive', got {cfg.mode!r}")
    return MsbmTrainer(dataset, cfg, on_iteration).run()


def run_two_marginal(
    x0: np.ndarray,
    x1: np.ndarray,
    cfg: MsbmConfig,
    t_end: float = 1.0,
    t_start: float = 0.0,
    on_iteration: Optional[Callable] = None,
) -> tuple[ControlFunction, ControlFunction, TrainReport]:
    """Bridge matching between two sample sets."""
    dataset = MarginalDataset.from_arrays([t_start, t_end], [x0, x1])
    return run_msbm(dataset, replace(cfg, mode="msbm", holdout=()), on_iteration)

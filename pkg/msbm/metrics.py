"""Distances between empirical distributions and the evaluation protocols."""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from qcodes.validators import Enum, Ints, MultiType, Numbers
from qcodes.validators import Sequence as SequenceOf
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist

from .common.errors import DatasetError
from .reference_bridge import ReferenceProcess
from .sde_sim import SimConfig, rollout_full, simulate
from .time_grid import MarginalDataset

logger = logging.getLogger(__name__)

METRICS = ("w1", "w2", "mmd", "swd")
PROTOCOLS = ("from_t0", "from_prev", "leave_one_out")


@dataclass(frozen=True)
class MetricConfig:
    """
    Args:
        projections: random directions of the sliced Wasserstein distance
        bandwidth: RBF bandwidth for MMD, "median" for the median heuristic on A and B pooled
        max_samples: larger sets are subsampled (seeded) before exact assignment
        seed: seed of projections and subsampling
        metrics: metrics reported by the protocols
        loo_start: leave-one-out rollouts start at "t0" or at the snapshot before the held-out one
    """

    projections: int = 128
    bandwidth: Union[str, float] = "median"
    max_samples: int = 2000
    seed: int = 0
    metrics: tuple = ("w1", "w2", "mmd", "swd")
    loo_start: str = "t0"

    def __post_init__(self):
        Ints(min_value=1).validate(self.projections, "projections")
        MultiType(Enum("median"), Numbers(min_value=0)).validate(self.bandwidth, "bandwidth")
        if self.bandwidth != "median" and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        Ints(min_value=1).validate(self.max_samples, "max_samples")
        Ints(min_value=0).validate(self.seed, "seed")
        metrics = tuple(self.metrics)
        SequenceOf(Enum(*METRICS)).validate(list(metrics), "metrics")
        if not metrics:
            raise ValueError("at least one metric is needed")
        Enum("t0", "adjacent").validate(self.loo_start, "loo_start")
        object.__setattr__(self, "metrics", metrics)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["metrics"] = list(self.metrics)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetricConfig:
        d = dict(d)
        if "metrics" in d:
            d["metrics"] = tuple(d["metrics"])
        return cls(**d)


def _samples(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"expected a non-empty (n, d) sample matrix, got shape {a.shape}")
    if a.shape[1] == 0:
        raise ValueError("samples have dimension 0")
    return a


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _samples(a), _samples(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def quantile_w2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact 2-Wasserstein distance between 1-D empirical measures, row by row.

    a: (..., n), b: (..., m). The quantile functions are piecewise constant
    on the breakpoints i/n and j/m; the squared gap is integrated exactly over
    the merged breakpoints.
    """
    a = np.sort(a, axis=-1)
    b = np.sort(b, axis=-1)
    n, m = a.shape[-1], b.shape[-1]
    if n == m:
        return np.sqrt(np.mean((a - b) ** 2, axis=-1))
    edges = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(edges, prepend=0.0)
    mid = edges - widths / 2
    ia = np.minimum((mid * n).astype(int), n - 1)
    ib = np.minimum((mid * m).astype(int), m - 1)
    return np.sqrt(np.sum(widths * (a[..., ia] - b[..., ib]) ** 2, axis=-1))


def sliced_wasserstein(a, b, cfg: Optional[MetricConfig] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Mean over random unit directions of the 1-D W2 between the projected samples."""
    cfg = cfg or MetricConfig()
    a, b = _pair(a, b)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    directions = rng.standard_normal((cfg.projections, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return float(np.mean(quantile_w2(directions @ a.T, directions @ b.T)))


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    median = float(np.median(pdist(pooled))) if len(pooled) > 1 else 0.0
    if median == 0:
        logger.warning("median pairwise distance is 0; falling back to bandwidth 1.0")
        return 1.0
    return median


def mmd_rbf(a, b, cfg: Optional[MetricConfig] = None) -> float:
    """Biased (V-statistic) MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 h^2))."""
    cfg = cfg or MetricConfig()
    a, b = _pair(a, b)
    h = median_bandwidth(a, b) if cfg.bandwidth == "median" else float(cfg.bandwidth)

    def k(x, y):
        return np.exp(-cdist(x, y, "sqeuclidean") / (2 * h**2))

    value = k(a, a).mean() + k(b, b).mean() - 2 * k(a, b).mean()
    return float(max(value, 0.0))


def csv_header(columns: Sequence[str], comment: Optional[str] = None) -> str:
    header = ",".join(columns)
    return header if not comment else f"# {comment}\n{header}"


def subsample(a: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if len(a) <= size:
        return a
    return a[np.sort(rng.choice(len(a), size, replace=False))]


def assignment_size(n: int, m: int, max_samples: int) -> int:
    """Rows per set that wasserstein_exact actually matches."""
    return min(n, m, max_samples)


def wasserstein_exact(a, b, p: int = 2, max_samples: int = 2000, seed: int = 0) -> float:
    """W1 (mean Euclidean cost) or W2 (root mean squared cost) of the optimal
    assignment; both sets are subsampled to min(n, m, max_samples) rows."""
    Enum(1, 2).validate(p, "p")
    a, b = _pair(a, b)
    size = assignment_size(len(a), len(b), max_samples)
    if size < max(len(a), len(b)):
        logger.info("wasserstein_exact: subsampling %d x %d points to %d (seed %d)", len(a), len(b), size, seed)
        # keyed by set size so that swapping a and b picks the same rows
        a = subsample(a, size, np.random.default_rng([seed, len(a)]))
        b = subsample(b, size, np.random.default_rng([seed, len(b)]))
    cost = cdist(a, b, "euclidean" if p == 1 else "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    mean_cost = float(cost[rows, cols].mean())
    return mean_cost if p == 1 else float(np.sqrt(mean_cost))


def compare_marginals(a, b, cfg: MetricConfig, rng: Optional[np.random.Generator] = None) -> dict:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    values = {}
    for name in cfg.metrics:
        if name == "w1":
            values[name] = wasserstein_exact(a, b, 1, cfg.max_samples, cfg.seed)
        elif name == "w2":
            values[name] = wasserstein_exact(a, b, 2, cfg.max_samples, cfg.seed)
        elif name == "mmd":
            values[name] = mmd_rbf(a, b, cfg)
        else:
            values[name] = sliced_wasserstein(a, b, cfg, rng)
    return values


@dataclass(frozen=True)
class Protocol:
    kind: str
    index: Optional[int] = None

    def __post_init__(self):
        Enum(*PROTOCOLS).validate(self.kind, "protocol")
        if (self.kind == "leave_one_out") != (self.index is not None):
            raise ValueError(f"only leave_one_out takes a snapshot index, got {self}")

    @classmethod
    def parse(cls, text: str) -> Protocol:
        """'from_t0', 'from_prev', 'leave_one_out:2' or 'leave_one_out(2)'."""
        match = re.fullmatch(r"\s*(\w+?)\s*(?:[:(]\s*(\d+)\s*\)?)?\s*", text)
        if match is None:
            raise ValueError(f"cannot parse protocol {text!r}")
        index = match.group(2)
        return cls(match.group(1), None if index is None else int(index))

    @property
    def tag(self) -> str:
        return self.kind if self.index is None else f"{self.kind}:{self.index}"


@dataclass
class EvalReport:
    protocol: str
    seed: int
    times: list = field(default_factory=list)
    values: dict = field(default_factory=dict)  # metric -> one value per time
    sample_sizes: list = field(default_factory=list)  # (generated, reference) per time
    direction: str = "forward"
    notes: list = field(default_factory=list)  # exact W1/W2 subsampling, one entry per affected time

    def add(self, t: float, metrics: dict, generated: int, reference: int) -> None:
        self.times.append(float(t))
        for name, value in metrics.items():
            self.values.setdefault(name, []).append(float(value))
        self.sample_sizes.append([int(generated), int(reference)])

    def note_subsampling(self, t: float, metrics: Sequence[str], size: int, seed: int) -> None:
        self.notes.append(dict(t=float(t), metrics=list(metrics), subsampled_to=int(size), seed=int(seed)))

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = {name: self.mean(name) for name in self.values}
        return d

    def to_csv(self, path: Union[str, Path], comment: Optional[str] = None) -> None:
        """Time points as rows, metrics as columns."""
        names = list(self.values)
        table = np.column_stack([self.times] + [self.values[n] for n in names])
        np.savetxt(path, table, fmt="%.10g", delimiter=",", header=csv_header(["t"] + names, comment), comments="")


def _check_compatible(ctrl, dataset: MarginalDataset) -> None:
    dim = getattr(ctrl, "dim", dataset.dim)
    if dim != dataset.dim:
        raise ValueError(f"control has dimension {dim}, dataset has dimension {dataset.dim}")


def evaluate_protocol(
    ctrl,
    dataset: MarginalDataset,
    protocol: Union[str, Protocol],
    cfg: MetricConfig,
    sim: SimConfig,
    ref: ReferenceProcess,
    seed: Optional[int] = None,
    direction: str = "forward",
) -> EvalReport:
    """Simulate `ctrl` on `dataset` (usually the test split) and compare with its snapshots.

    from_t0: one rollout from the first snapshot, every later grid time.
    from_prev: for every interval a fresh rollout from the snapshot at its start.
    leave_one_out:i: a rollout from t_0 (or from snapshot i-1, per cfg.loo_start)
    compared at t_i only.
    direction="backward" mirrors from_t0 and from_prev from the last snapshot.
    """
    if isinstance(protocol, str):
        protocol = Protocol.parse(protocol)
    Enum("forward", "backward").validate(direction, "direction")
    _check_compatible(ctrl, dataset)
    seed = cfg.seed if seed is None else seed
    sim = SimConfig(sim.steps_per_interval, seed=seed)
    sim_rng = np.random.default_rng([seed, 0])
    metric_rng = np.random.default_rng([seed, 1])
    report = EvalReport(protocol.tag, seed, direction=direction)
    grid = dataset.grid
    last = len(grid) - 1

    def record(j: int, generated: np.ndarray) -> None:
        reference = dataset.samples(j)
        report.add(grid.times[j], compare_marginals(generated, reference, cfg, metric_rng), len(generated), len(reference))
        exact = [name for name in cfg.metrics if name in ("w1", "w2")]
        size = assignment_size(len(generated), len(reference), cfg.max_samples)
        if exact and size < max(len(generated), len(reference)):
            report.note_subsampling(grid.times[j], exact, size, cfg.seed)

    if protocol.kind == "leave_one_out":
        j = protocol.index
        if not 1 <= j <= last:
            raise DatasetError(f"leave_one_out index {j} is not an interior or final snapshot of {len(grid)} times")
        if direction == "backward":
            raise ValueError("leave_one_out is evaluated forward only")
        if cfg.loo_start == "t0":
            generated = rollout_full(ctrl, dataset, "forward", sim, ref, rng=sim_rng).at(grid.times[j])
        else:
            generated = simulate(ctrl, dataset.samples(j - 1), grid.times[j - 1], grid.times[j], sim, ref, sim_rng).final
        record(j, generated)
        return report

    if protocol.kind == "from_t0":
        path = rollout_full(ctrl, dataset, direction, sim, ref, rng=sim_rng)
        order = range(1, last + 1) if direction == "forward" else range(last - 1, -1, -1)
        for j in order:
            record(j, path.at(grid.times[j]))
        return report

    for i in range(1, last + 1) if direction == "forward" else range(last, 0, -1):
        start, end = (i - 1, i) if direction == "forward" else (i, i - 1)
        path = simulate(ctrl, dataset.samples(start), grid.times[start], grid.times[end], sim, ref, sim_rng)
        record(end, path.final)
    return report


def summarize_reports(reports: Sequence[EvalReport]) -> dict:
    """Mean and standard deviation over seeds, per time point and metric, plus the mean over time points."""
    if not reports:
        raise ValueError("no reports to summarize")
    first = reports[0]
    for r in reports[1:]:
        if r.protocol != first.protocol or not np.allclose(r.times, first.times):
            raise ValueError("reports of different protocols or time points cannot be summarized together")
    summary = dict(protocol=first.protocol, seeds=[r.seed for r in reports], times=list(first.times), mean={}, std={})
    for name in first.values:
        values = np.array([r.values[name] for r in reports])
        summary["mean"][name] = values.mean(axis=0).tolist()
        summary["std"][name] = values.std(axis=0).tolist()
        per_seed = values.mean(axis=1)
        summary["mean"][f"{name}_over_times"] = float(per_seed.mean())
        summary["std"][f"{name}_over_times"] = float(per_seed.std())
    return summary


def write_summary_csv(summary: dict, path: Union[str, Path], comment: Optional[str] = None) -> None:
    """Rows: time points; columns: <metric>_mean, <metric>_std."""
    names = [n for n in summary["mean"] if not n.endswith("_over_times")]
    columns = [summary["times"]]
    header = ["t"]
    for n in names:
        columns += [summary["mean"][n], summary["std"][n]]
        header += [f"{n}_mean", f"{n}_std"]
    table = np.column_stack(columns)
    np.savetxt(path, table, fmt="%.10g", delimiter=",", header=csv_header(header, comment), comments="")



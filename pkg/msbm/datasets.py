"""Synthetic marginal generators, the snapshot directory format and train/test splits."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from qcodes.validators import Bool, Enum, Ints, Numbers
from qcodes.validators import Sequence as SequenceOf

from .common.errors import DatasetError
from .time_grid import MarginalDataset, TimeGrid

logger = logging.getLogger(__name__)

KINDS = ("petal", "gaussian_chain", "custom_mixture")
MANIFEST = "grid.json"
PETAL_JITTER = 0.1  # rad


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Args:
        kind: "petal", "gaussian_chain" or "custom_mixture"
        n: samples per snapshot
        noise: standard deviation of the per-point Gaussian noise
        seed: generator seed
        times: grid times; petal defaults to 0, 1, 2, 3, 4
        dim: ambient dimension of gaussian_chain (petal is always 2-D)
        petals: number of petal lobes
        radius: final lobe radius of the petal
        merge: petal lobes fold back to the origin at the last time
        amplitude: zig-zag amplitude of the default gaussian_chain means
        means: gaussian_chain means per time; an entry may list several modes
        components: custom_mixture, per time a list of {"mean", "std", "weight"}
    """

    kind: str = "petal"
    n: int = 500
    noise: float = 0.1
    seed: int = 0
    times: Optional[tuple] = None
    dim: int = 1
    petals: int = 5
    radius: float = 3.0
    merge: bool = False
    amplitude: float = 2.0
    means: Optional[tuple] = None
    components: Optional[tuple] = None

    def __post_init__(self):
        Enum(*KINDS).validate(self.kind, "kind")
        Ints(min_value=1).validate(self.n, "n")
        Numbers(min_value=0).validate(self.noise, "noise")
        Ints(min_value=0).validate(self.seed, "seed")
        if self.times is not None:
            times = tuple(float(t) for t in self.times)
            SequenceOf(Numbers(), require_sorted=True).validate(list(times), "times")
            object.__setattr__(self, "times", times)
        Ints(min_value=1).validate(self.dim, "dim")
        Ints(min_value=0).validate(self.petals, "petals")
        Numbers(min_value=0).validate(self.radius, "radius")
        Bool().validate(self.merge, "merge")
        Numbers().validate(self.amplitude, "amplitude")
        if self.means is not None:
            object.__setattr__(self, "means", tuple(self.means))
        if self.components is not None:
            object.__setattr__(self, "components", tuple(tuple(c) for c in self.components))

    def grid(self) -> TimeGrid:
        if self.times is not None:
            return TimeGrid(self.times)
        if self.kind == "petal":
            return TimeGrid((0.0, 1.0, 2.0, 3.0, 4.0))
        if self.kind == "gaussian_chain" and self.means is not None:
            return TimeGrid(tuple(float(j) for j in range(len(self.means))))
        if self.kind == "custom_mixture" and self.components is not None:
            return TimeGrid(tuple(float(j) for j in range(len(self.components))))
        return TimeGrid((0.0, 1.0, 2.0))

    def snapshot(self) -> dict:
        d = asdict(self)
        d["times"] = list(self.grid().times)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        return cls(**d)


def _truncated_normal(rng: np.random.Generator, n: int, dim: int, scale: float) -> np.ndarray:
    """Isotropic Gaussian points redrawn until their norm is within 3 scale."""
    z = rng.standard_normal((n, dim))
    bad = np.linalg.norm(z, axis=1) > 3
    while bad.any():
        z[bad] = rng.standard_normal((int(bad.sum()), dim))
        bad = np.linalg.norm(z, axis=1) > 3
    return scale * z


def gen_petal(spec: SyntheticSpec) -> MarginalDataset:
    """A tight blob at the origin that splits into `petals` lobes moving outward.

    Point r of snapshot j sits at polar angle 2 pi l / p + jitter on lobe l,
    radius radius * s_j with s_j the normalised time; with `merge` the radius
    follows radius * sin(pi s_j), so the lobes fold back into the origin at the
    last time.
    """
    if spec.petals < 2:
        raise ValueError(f"a petal dataset needs at least 2 lobes, got {spec.petals}")
    grid = spec.grid()
    rng = np.random.default_rng(spec.seed)
    lobes = rng.integers(spec.petals, size=spec.n)
    jitter = PETAL_JITTER * rng.standard_normal(spec.n)
    angle = 2 * np.pi * lobes / spec.petals + jitter
    direction = np.column_stack([np.cos(angle), np.sin(angle)])

    samples = []
    for t in grid.times:
        s = (t - grid.t_start) / grid.horizon
        r = spec.radius * (np.sin(np.pi * s) if spec.merge else s)
        samples.append(r * direction + _truncated_normal(rng, spec.n, 2, spec.noise))
    return MarginalDataset.from_arrays(grid.times, samples, metadata=dict(generator=spec.snapshot()))


def _chain_means(spec: SyntheticSpec, grid: TimeGrid) -> list:
    if spec.means is not None:
        if len(spec.means) != len(grid):
            raise ValueError(f"{len(spec.means)} means for {len(grid)} times")
        return [np.atleast_1d(np.asarray(m, dtype=float)) for m in spec.means]
    # 0, +a, -a, +a, ..., 0
    k = len(grid) - 1
    return [np.array([0.0 if j in (0, k) else spec.amplitude * (-1) ** (j + 1)]) for j in range(len(grid))]


def gen_gaussian_chain(spec: SyntheticSpec) -> MarginalDataset:
    """Snapshots whose modes zig-zag away from the straight line between the endpoints.

    Modes sit at the given value on the first coordinate (0 elsewhere); points
    are split evenly across the modes of a snapshot.
    """
    grid = spec.grid()
    if len(grid) < 3:
        raise ValueError("a gaussian chain needs at least 3 times")
    rng = np.random.default_rng(spec.seed)
    samples = []
    for modes in _chain_means(spec, grid):
        counts = np.full(len(modes), spec.n // len(modes))
        counts[: spec.n % len(modes)] += 1
        centres = np.zeros((spec.n, spec.dim))
        centres[:, 0] = np.repeat(modes, counts)
        samples.append(centres + spec.noise * rng.standard_normal((spec.n, spec.dim)))
    return MarginalDataset.from_arrays(grid.times, samples, metadata=dict(generator=spec.snapshot()))


def gen_custom_mixture(spec: SyntheticSpec) -> MarginalDataset:
    """Per time a Gaussian mixture with isotropic components {"mean", "std", "weight"}."""
    if spec.components is None:
        raise ValueError("custom_mixture needs components")
    grid = spec.grid()
    if len(spec.components) != len(grid):
        raise ValueError(f"{len(spec.components)} component lists for {len(grid)} times")
    rng = np.random.default_rng(spec.seed)
    samples = []
    for j, mixture in enumerate(spec.components):
        means = np.array([np.atleast_1d(c["mean"]) for c in mixture], dtype=float)
        stds = np.array([c.get("std", spec.noise) for c in mixture], dtype=float)
        weights = np.array([c.get("weight", 1.0) for c in mixture], dtype=float)
        if np.any(weights < 0) or weights.sum() <= 0 or np.any(stds < 0):
            raise ValueError(f"invalid mixture at time index {j}")
        counts = rng.multinomial(spec.n, weights / weights.sum())
        which = np.repeat(np.arange(len(mixture)), counts)
        samples.append(means[which] + stds[which, None] * rng.standard_normal((spec.n, means.shape[1])))
    return MarginalDataset.from_arrays(grid.times, samples, metadata=dict(generator=spec.snapshot()))


GENERATORS = {
    "petal": gen_petal,
    "gaussian_chain": gen_gaussian_chain,
    "custom_mixture": gen_custom_mixture,
}


def generate(spec: SyntheticSpec) -> MarginalDataset:
    dataset = GENERATORS[spec.kind](spec)
    logger.info("generated %s: %d times, sizes %s, dim %d", spec.kind, len(dataset.grid), dataset.sizes, dataset.dim)
    return dataset


def snapshot_file(j: int) -> str:
    return f"snapshot_{j}.csv"


def save_snapshots(dataset: MarginalDataset, path: Union[str, Path]) -> Path:
    """Write `snapshot_<j>.csv` (header x0..x{d-1}) per time and the `grid.json` manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"x{c}" for c in range(dataset.dim))
    files = []
    for j in range(len(dataset.grid)):
        files.append(snapshot_file(j))
        np.savetxt(path / files[-1], dataset.samples(j), fmt="%.17g", delimiter=",", header=header, comments="")
    manifest = dict(
        times=list(dataset.grid.times),
        files=files,
        dim=dataset.dim,
        holdout=sorted(dataset.holdout),
        metadata=dataset.metadata,
    )
    with open(path / MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _read_snapshot(file: Path) -> np.ndarray:
    if not file.is_file():
        raise DatasetError("snapshot file not found", str(file))
    with open(file) as f:
        header = f.readline().strip().split(",")
    expected = [f"x{c}" for c in range(len(header))]
    if header != expected:
        raise DatasetError(f"header must be {','.join(expected)}, got {','.join(header)}", str(file))
    try:
        samples = np.loadtxt(file, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as e:
        raise DatasetError(f"cannot parse samples: {e}", str(file)) from e
    if samples.size == 0:
        raise DatasetError("snapshot holds no samples", str(file))
    if samples.shape[1] != len(header):
        raise DatasetError(f"{samples.shape[1]} columns under a {len(header)}-column header", str(file))
    bad = np.flatnonzero(~np.isfinite(samples).all(axis=1))
    if len(bad):
        # row: line number in the file, header = line 1
        raise DatasetError("non-finite values", str(file), row=int(bad[0]) + 2)
    return samples


def load_snapshots(path: Union[str, Path]) -> MarginalDataset:
    path = Path(path)
    manifest_file = path / MANIFEST
    if not manifest_file.is_file():
        raise DatasetError(f"no {MANIFEST} manifest", str(path))
    with open(manifest_file) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"invalid manifest: {e}", str(manifest_file)) from e
    if "times" not in manifest:
        raise DatasetError("manifest lists no times", str(manifest_file))
    times = manifest["times"]
    files = manifest.get("files", [snapshot_file(j) for j in range(len(times))])
    if len(files) != len(times):
        raise DatasetError(f"{len(files)} files for {len(times)} times", str(manifest_file))
    samples = [_read_snapshot(path / name) for name in files]
    dims = [s.shape[1] for s in samples]
    if len(set(dims)) != 1:
        raise DatasetError(f"snapshots have different dimensions {dims}", str(path))
    if "dim" in manifest and manifest["dim"] != dims[0]:
        raise DatasetError(f"manifest declares dim {manifest['dim']}, files have {dims[0]}", str(path))
    try:
        dataset = MarginalDataset.from_arrays(
            times, samples, holdout=manifest.get("holdout", ()), metadata=manifest.get("metadata", {})
        )
    except ValueError as e:
        raise DatasetError(str(e), str(path)) from e
    logger.info("loaded %s: %d times, sizes %s, dim %d", path, len(dataset.grid), dataset.sizes, dataset.dim)
    return dataset


def split(dataset: MarginalDataset, ratio: float, seed: int = 0) -> tuple[MarginalDataset, MarginalDataset]:
    """Disjoint per-snapshot row split: round(ratio n) rows train, the rest test."""
    Numbers(0, 1).validate(ratio, "ratio")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for j in range(len(dataset.grid)):
        x = dataset.samples(j)
        n_train = int(round(ratio * len(x)))
        if not 1 <= n_train < len(x):
            raise DatasetError(f"snapshot {j} with {len(x)} rows is too small to split at ratio {ratio}")
        order = rng.permutation(len(x))
        train.append(x[np.sort(order[:n_train])])
        test.append(x[np.sort(order[n_train:])])
    meta = dict(dataset.metadata, split=dict(ratio=ratio, seed=seed))
    return (
        MarginalDataset.from_arrays(dataset.grid.times, train, dataset.holdout, dict(meta, part="train")),
        MarginalDataset.from_arrays(dataset.grid.times, test, dataset.holdout, dict(meta, part="test")),
    )

"""Run folders: a plottr DDH5Writer per command, with the resolved config and build id saved alongside."""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
from contextlib import contextmanager
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np
from plottr.data.datadict_storage import DataDict, DDH5Writer

from . import __version__
from .metrics import METRICS

logger = logging.getLogger(__name__)

CONFIG_SNAPSHOT = "config_snapshot.json"


@lru_cache(maxsize=1)
def build_id() -> str:
    ident = f"msbm {__version__}"
    try:
        describe = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return ident
    if describe.returncode == 0 and describe.stdout.strip():
        ident += f" ({describe.stdout.strip()})"
    return ident


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=_plain)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def provenance(config: dict) -> str:
    """One-line build id and config hash for the comment row of CSV outputs."""
    return f"{build_id()} config_sha256 {config_hash(config)} (see {CONFIG_SNAPSHOT})"


def stamped(config: dict, **content) -> dict:
    """`content` with the resolved config and build id attached."""
    return dict(content, config=config, config_sha256=config_hash(config), build=build_id())


def training_data() -> DataDict:
    data = DataDict(
        iteration=dict(),
        step=dict(),
        backward_loss=dict(axes=["iteration", "step"]),
        forward_loss=dict(axes=["iteration", "step"]),
    )
    data.validate()
    return data


def marginal_data() -> DataDict:
    data = DataDict(
        iteration=dict(),
        t=dict(),
        w2=dict(axes=["iteration", "t"]),
    )
    data.validate()
    return data


def metric_data(metrics: Sequence[str] = METRICS) -> DataDict:
    """One row per (protocol, seed, time point); `protocol` indexes the configured protocol list."""
    data = DataDict(
        protocol=dict(),
        seed=dict(),
        t=dict(),
        **{name: dict(axes=["protocol", "seed", "t"]) for name in metrics},
    )
    data.validate()
    return data


def trajectory_data(dim: int) -> DataDict:
    data = DataDict(
        path_id=dict(),
        t=dict(),
        **{f"x{c}": dict(axes=["path_id", "t"]) for c in range(dim)},
    )
    data.validate()
    return data


def add_trajectories(writer: DDH5Writer, paths) -> None:
    n_times, batch, dim = paths.states.shape
    writer.add_data(
        path_id=np.repeat(np.arange(batch), n_times),
        t=np.tile(paths.times, batch),
        **{f"x{c}": paths.states[:, :, c].T.reshape(-1) for c in range(dim)},
    )


@contextmanager
def run_folder(
    data: DataDict,
    out: Union[str, Path],
    name: str,
    config: dict,
    files: Sequence[Union[str, Path]] = (),
) -> Iterator[DDH5Writer]:
    """Open a date-stamped DDH5 run folder under `out`, back up `files` and
    save the config snapshot; yields the writer."""
    Path(out).mkdir(parents=True, exist_ok=True)
    with DDH5Writer(data, str(out), name=name) as writer:
        writer.backup_file([str(f) for f in files])
        writer.save_dict(CONFIG_SNAPSHOT, stamped(config))
        logger.info("recording %s into %s", name, folder(writer))
        yield writer


def folder(writer: DDH5Writer) -> Path:
    return Path(writer.filepath).parent


def write_json(path: Union[str, Path], config: dict, **content) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        json.dump(stamped(config, **content), f, indent=2, sort_keys=True, default=_plain)
    return path


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def add_losses(writer: DDH5Writer, iteration: int, backward: Sequence[float], forward: Sequence[float]) -> None:
    steps = len(forward)
    writer.add_data(
        iteration=np.full(steps, iteration),
        step=np.arange(steps),
        backward_loss=np.asarray(backward),
        forward_loss=np.asarray(forward),
    )


def add_marginal_fit(writer: DDH5Writer, iteration: int, times: Sequence[float], w2: Sequence[float]) -> None:
    writer.add_data(
        iteration=np.full(len(times), iteration),
        t=np.asarray(times),
        w2=np.asarray(w2),
    )

"""Control networks v_theta (forward) and u_phi (backward).

A residual multilayer perceptron on concat(x, sinusoidal embedding of t) with
hand-written backpropagation, Adam updates and an exponential moving average
of the parameters used at evaluation time.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from qcodes.validators import Enum, Ints, Multiples, Numbers
from scipy.special import expit

from .common.errors import DivergenceError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("silu", "tanh", "relu")
ROLES = ("forward", "backward")
CHECKPOINT_FORMAT = "msbm-checkpoint/1"


def activate(name: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation and its elementwise derivative."""
    if name == "silu":
        s = expit(z)
        return z * s, s * (1 + z * (1 - s))
    if name == "tanh":
        a = np.tanh(z)
        return a, 1 - a**2
    if name == "relu":
        return np.maximum(z, 0), (z > 0).astype(z.dtype)
    raise ValueError(f"unknown activation {name!r}")


def time_embedding(t: np.ndarray, width: int, max_frequency: float) -> np.ndarray:
    half = width // 2
    freqs = np.geomspace(1.0, max_frequency, half)
    angles = np.asarray(t, dtype=float)[:, None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass(frozen=True)
class Architecture:
    dim: int
    hidden: int = 64
    depth: int = 2  # residual blocks
    embedding: int = 32  # time-embedding width
    activation: str = "silu"
    max_frequency: float = 16.0

    def __post_init__(self):
        Ints(min_value=1).validate(self.dim, "dim")
        Ints(min_value=1).validate(self.hidden, "hidden")
        Ints(min_value=0).validate(self.depth, "depth")
        Multiples(2, min_value=2).validate(self.embedding, "embedding")
        Enum(*ACTIVATIONS).validate(self.activation, "activation")
        Numbers(min_value=1.0).validate(self.max_frequency, "max_frequency")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        h = self.hidden
        shapes = [("in.w", (self.dim + self.embedding, h)), ("in.b", (h,))]
        for k in range(self.depth):
            shapes += [
                (f"block{k}.w1", (h, h)),
                (f"block{k}.b1", (h,)),
                (f"block{k}.w2", (h, h)),
                (f"block{k}.b2", (h,)),
            ]
        shapes += [("out.w", (h, self.dim)), ("out.b", (self.dim,))]
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Named views into a flat parameter (or gradient) vector."""
        views = {}
        offset = 0
        for name, shape in self.layout():
            size = int(np.prod(shape))
            views[name] = flat[offset : offset + size].reshape(shape)
            offset += size
        return views

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Normal(0, 1/fan_in) weights, zero biases, zero output layer."""
        flat = np.zeros(self.n_params)
        for name, view in self.unpack(flat).items():
            if name.endswith(".w") or name[-2:] in ("w1", "w2"):
                if not name.startswith("out"):
                    view[...] = rng.standard_normal(view.shape) / np.sqrt(view.shape[0])
        return flat

    def snapshot(self) -> dict:
        return asdict(self)


class RegressionBatch(NamedTuple):
    t: np.ndarray  # (n,)
    x: np.ndarray  # (n, d)
    target: np.ndarray  # (n, d)

    @property
    def size(self) -> int:
        return len(self.t)

    @property
    def t_range(self) -> Optional[tuple[float, float]]:
        if self.size == 0:
            return None
        return float(np.min(self.t)), float(np.max(self.t))

    @classmethod
    def coerce(cls, batch) -> RegressionBatch:
        """Accept a RegressionBatch or a list of (t, x, target) tuples."""
        if isinstance(batch, cls):
            return batch
        t, x, target = zip(*batch)
        return cls(np.asarray(t, dtype=float), np.atleast_2d(np.asarray(x, dtype=float)), np.atleast_2d(np.asarray(target, dtype=float)))

    @classmethod
    def concat(cls, batches: Sequence[RegressionBatch]) -> RegressionBatch:
        return cls(
            np.concatenate([b.t for b in batches]),
            np.concatenate([b.x for b in batches]),
            np.concatenate([b.target for b in batches]),
        )


class ControlFunction:
    """(t, x) -> R^d, continuous in both arguments.

    Args:
        arch: network layout
        params: flat parameter vector; freshly initialised when omitted
        role: "forward" (v_theta) or "backward" (u_phi)
        rng: generator used for initialisation
    """

    def __init__(
        self,
        arch: Architecture,
        params: Optional[np.ndarray] = None,
        role: str = "forward",
        rng: Optional[np.random.Generator] = None,
    ):
        Enum(*ROLES).validate(role, "role")
        self.arch = arch
        self.role = role
        if params is None:
            params = arch.init_params(rng if rng is not None else np.random.default_rng())
        params = np.array(params, dtype=float)
        if params.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {params.shape}")
        self.params = params

    @property
    def dim(self) -> int:
        return self.arch.dim

    def with_params(self, params: np.ndarray) -> ControlFunction:
        return ControlFunction(self.arch, params, self.role)

    def __call__(self, t, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(t, x)
        return out

    def forward(self, t, x: np.ndarray) -> tuple[np.ndarray, dict]:
        arch = self.arch
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != arch.dim:
            raise ValueError(f"expected states of shape (n, {arch.dim}), got {x.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        p = arch.unpack(self.params)

        inp = np.concatenate([x, time_embedding(t, arch.embedding, arch.max_frequency)], axis=1)
        h, d_in = activate(arch.activation, inp @ p["in.w"] + p["in.b"])
        blocks = []
        for k in range(arch.depth):
            a1, d1 = activate(arch.activation, h)
            a2, d2 = activate(arch.activation, a1 @ p[f"block{k}.w1"] + p[f"block{k}.b1"])
            h = h + a2 @ p[f"block{k}.w2"] + p[f"block{k}.b2"]
            blocks.append((a1, d1, a2, d2))
        a_out, d_out = activate(arch.activation, h)
        out = a_out @ p["out.w"] + p["out.b"]
        cache = dict(inp=inp, d_in=d_in, blocks=blocks, a_out=a_out, d_out=d_out)
        return out, cache

    def backward(self, cache: dict, grad_out: np.ndarray) -> np.ndarray:
        """Gradient of sum(grad_out * output) with respect to the flat parameters."""
        arch = self.arch
        p = arch.unpack(self.params)
        grad = np.zeros_like(self.params)
        g = arch.unpack(grad)

        g["out.w"][...] = cache["a_out"].T @ grad_out
        g["out.b"][...] = grad_out.sum(axis=0)
        gh = (grad_out @ p["out.w"].T) * cache["d_out"]
        for k in reversed(range(arch.depth)):
            a1, d1, a2, d2 = cache["blocks"][k]
            g[f"block{k}.w2"][...] = a2.T @ gh
            g[f"block{k}.b2"][...] = gh.sum(axis=0)
            gz1 = (gh @ p[f"block{k}.w2"].T) * d2
            g[f"block{k}.w1"][...] = a1.T @ gz1
            g[f"block{k}.b1"][...] = gz1.sum(axis=0)
            gh = gh + (gz1 @ p[f"block{k}.w1"].T) * d1
        gz = gh * cache["d_in"]
        g["in.w"][...] = cache["inp"].T @ gz
        g["in.b"][...] = gz.sum(axis=0)
        return grad


def eval_control(ctrl: ControlFunction, t: float, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != ctrl.dim:
            raise ValueError(f"expected a {ctrl.dim}-vector, got shape {x.shape}")
        return ctrl(t, x[None, :])[0]
    return ctrl(t, x)


@dataclass
class TrainerState:
    """Adam moments, step count and EMA shadow of one control."""

    learning_rate: float
    ema_decay: float = 0.999
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: np.ndarray = field(default=None, repr=False)
    second_moment: np.ndarray = field(default=None, repr=False)
    shadow: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        Numbers(min_value=0).validate(self.learning_rate, "learning_rate")
        Numbers(0, 1).validate(self.ema_decay, "ema_decay")
        if not 0 < self.ema_decay < 1:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        Numbers(0, 1).validate(self.beta1, "beta1")
        Numbers(0, 1).validate(self.beta2, "beta2")
        Ints(min_value=0).validate(self.step, "step")

    @classmethod
    def for_control(cls, ctrl: ControlFunction, learning_rate: float, ema_decay: float = 0.999) -> TrainerState:
        return cls(
            learning_rate=learning_rate,
            ema_decay=ema_decay,
            first_moment=np.zeros_like(ctrl.params),
            second_moment=np.zeros_like(ctrl.params),
            shadow=ctrl.params.copy(),
        )

    def hyperparameters(self) -> dict:
        return dict(
            learning_rate=self.learning_rate,
            ema_decay=self.ema_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            step=self.step,
        )


def loss_and_grad(ctrl: ControlFunction, batch, normalizer: Optional[int] = None) -> tuple[float, np.ndarray]:
    """Sum of squared residuals divided by `normalizer` (default: batch size), and its gradient.

    Chunks of one minibatch evaluated with the full minibatch size as
    normalizer add up to the loss and gradient of the whole minibatch.
    """
    batch = RegressionBatch.coerce(batch)
    if batch.size == 0:
        return 0.0, np.zeros_like(ctrl.params)
    n = batch.size if normalizer is None else normalizer
    out, cache = ctrl.forward(batch.t, batch.x)
    residual = out - batch.target
    loss = float(np.sum(residual**2) / n)
    return loss, ctrl.backward(cache, 2 * residual / n)


def apply_update(ctrl: ControlFunction, grad: np.ndarray, state: TrainerState) -> None:
    """One Adam step on ctrl.params followed by the EMA shadow update, in place."""
    state.step += 1
    state.first_moment *= state.beta1
    state.first_moment += (1 - state.beta1) * grad
    state.second_moment *= state.beta2
    state.second_moment += (1 - state.beta2) * grad**2
    m_hat = state.first_moment / (1 - state.beta1**state.step)
    v_hat = state.second_moment / (1 - state.beta2**state.step)
    ctrl.params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    state.shadow *= state.ema_decay
    state.shadow += (1 - state.ema_decay) * ctrl.params


def regression_step(ctrl: ControlFunction, batch, state: TrainerState) -> float:
    """Mean-squared-error step on (t, x, target); returns the loss before the update."""
    batch = RegressionBatch.coerce(batch)
    assert batch.size > 0, "empty regression batch"
    loss, grad = loss_and_grad(ctrl, batch)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite {ctrl.role} loss", step=state.step, t_range=batch.t_range)
    apply_update(ctrl, grad, state)
    return loss


def ema_swap(ctrl: ControlFunction, state: TrainerState) -> ControlFunction:
    """The control evaluated with the EMA shadow parameters; `ctrl` is left untouched."""
    return ctrl.with_params(state.shadow.copy())


@dataclass
class Checkpoint:
    controls: dict
    states: dict
    meta: dict

    def ema(self, role: str) -> ControlFunction:
        return ema_swap(self.controls[role], self.states[role])


def _le(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array, dtype="<f8")


def save_checkpoint(
    path: Union[str, Path],
    controls: Mapping[str, tuple[ControlFunction, TrainerState]],
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write an .npz container: little-endian float64 arrays `<role>.params`,
    `<role>.first_moment`, `<role>.second_moment`, `<role>.shadow`, plus a
    JSON `descriptor` string holding architectures, optimiser settings and `meta`.
    """
    path = Path(path)
    arrays = {}
    descriptor = dict(format=CHECKPOINT_FORMAT, controls={}, meta=dict(meta or {}))
    for role, (ctrl, state) in controls.items():
        arrays[f"{role}.params"] = _le(ctrl.params)
        arrays[f"{role}.first_moment"] = _le(state.first_moment)
        arrays[f"{role}.second_moment"] = _le(state.second_moment)
        arrays[f"{role}.shadow"] = _le(state.shadow)
        descriptor["controls"][role] = dict(arch=ctrl.arch.snapshot(), state=state.hyperparameters())
    arrays["descriptor"] = np.array(json.dumps(descriptor, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info("checkpoint written to %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with np.load(path, allow_pickle=False) as archive:
        descriptor = json.loads(str(archive["descriptor"]))
        if descriptor.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an msbm checkpoint")
        controls, states = {}, {}
        for role, entry in descriptor["controls"].items():
            arch = Architecture(**entry["arch"])
            controls[role] = ControlFunction(arch, archive[f"{role}.params"].astype(float), role)
            states[role] = TrainerState(
                **entry["state"],
                first_moment=archive[f"{role}.first_moment"].astype(float),
                second_moment=archive[f"{role}.second_moment"].astype(float),
                shadow=archive[f"{role}.shadow"].astype(float),
            )
    return Checkpoint(controls, states, descriptor["meta"])

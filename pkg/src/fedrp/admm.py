"""Consensus ADMM: the classic full-space variant and the projected variant.

Per client and round, the projected augmented objective is

    L_i(w) = f_i(w) + y^T (A w - z_bar) + (rho/2) ||A w - z_bar||^2

minimized inexactly by E epochs of minibatch gradient descent; its exact
gradient is grad f_i(w) + A^T (y + rho (A w - z_bar)), computed matrix-free.
The classic variant is the same machinery under the identity map. After a
local solve the full-shard objective must not have increased; a violating
solve is retried at half the learning rate, up to 10 halvings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .data import Dataset, batches as data_batches, full_batch
from .models import Batch, ModelSpec, loss_and_gradient
from .projection import IdentityMap, as_linear_map
from . import rng

DECREASE_TOL = 1e-6
MAX_HALVINGS = 10


class AdmmError(RuntimeError):
    pass


class DivergenceError(AdmmError):
    """Local solve produced a non-finite objective."""

    def __init__(self, message: str, round_index: int | None = None, client_id: int | None = None):
        super().__init__(message)
        self.round_index = round_index
        self.client_id = client_id


@dataclass
class ClientAdmmState:
    w: np.ndarray
    y: np.ndarray
    rho: float

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        # rho = 0 is allowed here so the penalty-free limiting case is expressible;
        # experiment configs enforce strict positivity.
        if self.rho < 0:
            raise AdmmError(f"rho must be nonnegative, got {self.rho}")


@dataclass
class GlobalState:
    z_bar: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, dim: int) -> "GlobalState":
        return cls(z_bar=np.zeros(dim), round=0)


@dataclass(frozen=True)
class LocalSolveConfig:
    epochs: int
    batch_size: int
    learning_rate: float

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise AdmmError("epochs, batch_size and learning_rate must be positive")


class LocalProblem(Protocol):
    """The f_i term: loss/gradient on batches plus an epoch batch stream."""

    def loss_and_gradient(self, w: np.ndarray, batch) -> tuple[float, np.ndarray]: ...

    def loss(self, w: np.ndarray, batch) -> float: ...

    def epoch_batches(self, epoch_index: int, batch_size: int) -> Iterable: ...

    def full(self): ...


class ModelProblem:
    """f_i = model loss on a dataset shard."""

    def __init__(self, spec: ModelSpec, ds: Dataset, shard: np.ndarray, shuffle_seed: int):
        self.spec = spec
        self.ds = ds
        self.shard = np.asarray(shard, dtype=np.int64)
        if self.shard.size == 0:
            raise AdmmError("client shard is empty")
        self.shuffle_seed = shuffle_seed
        self._full = full_batch(ds, self.shard)

    def loss_and_gradient(self, w, batch):
        return loss_and_gradient(self.spec, w, batch)

    def loss(self, w, batch):
        return loss_and_gradient(self.spec, w, batch)[0]

    def epoch_batches(self, epoch_index: int, batch_size: int):
        epoch_seed = rng.derive_seed(self.shuffle_seed, "epoch", epoch_index)
        return data_batches(self.ds, self.shard, batch_size, epoch_seed)

    def full(self):
        return self._full


class QuadraticProblem:
    """f_i(w) = 0.5 ||w - c||^2; the analytic workhorse for convergence tests."""

    def __init__(self, center: np.ndarray):
        self.center = np.asarray(center, dtype=np.float64)

    def loss_and_gradient(self, w, batch=None):
        diff = w - self.center
        return 0.5 * float(diff @ diff), diff

    def loss(self, w, batch=None):
        return self.loss_and_gradient(w, batch)[0]

    def epoch_batches(self, epoch_index: int, batch_size: int):
        return [None]

    def full(self):
        return None


class ZeroObjective(QuadraticProblem):
    """f_i identically zero (isolates the penalty terms)."""

    def __init__(self):
        pass

    def loss_and_gradient(self, w, batch=None):
        return 0.0, np.zeros_like(w)

    def loss(self, w, batch=None):
        return 0.0


def augmented_objective_fedrp(
    state: ClientAdmmState, proj, z_bar: np.ndarray, problem: LocalProblem, batch
) -> float:
    """Value of the projected augmented objective at state.w on one batch's f_i."""
    proj = as_linear_map(proj)
    residual = proj.project(state.w) - z_bar
    return (
        problem.loss(state.w, batch)
        + float(state.y @ residual)
        + 0.5 * state.rho * float(residual @ residual)
    )


def augmented_objective_grad_fedrp(
    state: ClientAdmmState, proj, z_bar: np.ndarray, problem: LocalProblem, batch
) -> np.ndarray:
    """Exact gradient: grad f_i(w) + A^T (y + rho (A w - z_bar))."""
    proj = as_linear_map(proj)
    _, grad = problem.loss_and_gradient(state.w, batch)
    residual = proj.project(state.w) - z_bar
    return grad + proj.project_transpose(state.y + state.rho * residual)


@dataclass
class LocalUpdateStats:
    mean_data_loss: float
    objective_before: float
    objective_after: float
    halvings: int
    used_fallback: bool = False


def _objective_value(w, proj, y, rho, z_bar, problem) -> float:
    residual = proj.project(w) - z_bar
    return (
        problem.loss(w, problem.full())
        + float(y @ residual)
        + 0.5 * rho * float(residual @ residual)
    )


def local_update_fedrp(
    state: ClientAdmmState,
    proj,
    z_bar: np.ndarray,
    problem: LocalProblem,
    cfg: LocalSolveConfig,
    epoch_offset: int = 0,
) -> tuple[np.ndarray, LocalUpdateStats]:
    """E epochs of minibatch descent on the augmented objective.

    Guarantees a non-increasing full-shard objective (within DECREASE_TOL)
    via learning-rate backoff; falls back to the incoming iterate if even
    the smallest rate fails, which preserves the guarantee trivially.
    """
    proj = as_linear_map(proj)
    z_bar = np.asarray(z_bar, dtype=np.float64)
    w0 = state.w.copy()
    y, rho = state.y, state.rho
    f0 = _objective_value(w0, proj, y, rho, z_bar, problem)
    if not np.isfinite(f0):
        raise DivergenceError(f"objective already non-finite at round start ({f0})")

    lr = cfg.learning_rate
    last_nonfinite = None
    for halvings in range(MAX_HALVINGS + 1):
        w = w0.copy()
        loss_sum, loss_count = 0.0, 0
        # overflow here is not an error: a diverging attempt is detected below
        # and retried at a smaller rate
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(cfg.epochs):
                for batch in problem.epoch_batches(epoch_offset + epoch, cfg.batch_size):
                    data_loss, grad = problem.loss_and_gradient(w, batch)
                    residual = proj.project(w) - z_bar
                    step = grad + proj.project_transpose(y + rho * residual)
                    w -= lr * step
                    loss_sum += data_loss
                    loss_count += 1
            f1 = _objective_value(w, proj, y, rho, z_bar, problem)
        if not np.isfinite(f1):
            last_nonfinite = f1
            lr *= 0.5
            continue
        if f1 <= f0 + DECREASE_TOL:
            stats = LocalUpdateStats(
                mean_data_loss=loss_sum / max(loss_count, 1),
                objective_before=f0,
                objective_after=f1,
                halvings=halvings,
            )
            return w, stats
        lr *= 0.5
    if last_nonfinite is not None:
        raise DivergenceError(
            f"objective non-finite after {MAX_HALVINGS} halvings ({last_nonfinite})"
        )
    # every rate increased the objective: stay put (stationary point or noise floor)
    stats = LocalUpdateStats(
        mean_data_loss=problem.loss(w0, problem.full()),
        objective_before=f0,
        objective_after=f0,
        halvings=MAX_HALVINGS,
        used_fallback=True,
    )
    return w0, stats


def dual_update_fedrp(state: ClientAdmmState, proj, w_new: np.ndarray, z_bar: np.ndarray) -> np.ndarray:
    """y + rho (A w_new - z_bar)."""
    proj = as_linear_map(proj)
    z_bar = np.asarray(z_bar, dtype=np.float64)
    residual = proj.project(np.asarray(w_new, dtype=np.float64)) - z_bar
    if state.y.shape != residual.shape:
        raise AdmmError(f"dual has shape {state.y.shape}, residual {residual.shape}")
    return state.y + state.rho * residual


def compute_z(proj_next, w_new: np.ndarray) -> np.ndarray:
    """Next-round message: the fresh map applied to the new local parameters."""
    return as_linear_map(proj_next).project(np.asarray(w_new, dtype=np.float64))


def aggregate(z_list: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of the clients' vectors."""
    if len(z_list) == 0:
        raise AdmmError("aggregate needs at least one vector")
    first = np.asarray(z_list[0], dtype=np.float64)
    total = first.copy()
    for z in z_list[1:]:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != first.shape:
            raise AdmmError(f"vector shapes differ: {z.shape} vs {first.shape}")
        total += z
    return total / len(z_list)


def local_update_classic(
    state: ClientAdmmState,
    z_bar: np.ndarray,
    problem: LocalProblem,
    cfg: LocalSolveConfig,
    epoch_offset: int = 0,
) -> tuple[np.ndarray, LocalUpdateStats]:
    """Classic local step: the projected step under the identity map."""
    ident = IdentityMap(state.w.shape[0])
    return local_update_fedrp(state, ident, z_bar, problem, cfg, epoch_offset)


def dual_update_classic(state: ClientAdmmState, w_new: np.ndarray, z_bar: np.ndarray) -> np.ndarray:
    """y + rho (w_new - z_bar)."""
    return dual_update_fedrp(state, IdentityMap(state.w.shape[0]), w_new, z_bar)

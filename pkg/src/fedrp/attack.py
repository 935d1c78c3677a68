"""Gradient-inversion attack harness.

Reconstructs a batch-1 training sample from what a parameter-sending
baseline leaks (a gradient, or two consecutive parameter snapshots), and
runs the same best effort against a projected message to quantify the gap.
The attacker only ever sees declared observations: the gradient matching
loss ||grad(x_hat, y_hat; w) - g_obs||^2 is minimized jointly over the
dummy input and a soft label distribution, with the input projected onto
the known data range [0, 1]. Optimization is derivative-free-ish: central
finite differences with an adaptive step (the problems are tiny).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import rng
from .models import Batch, ModelSpec, gradient, gradient_soft_targets, init_params
from .projection import ProjectionSpec, project, project_transpose

ITERATION_CAP = 5000
_FD_STEP = 1e-6


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackObservation:
    kind: Literal["gradient", "param_snapshots", "projected_vector"]
    payload: tuple[np.ndarray, ...]
    known_learning_rate: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "param_snapshots" and len(self.payload) != 2:
            raise AttackError("param_snapshots carries exactly two consecutive w's")


@dataclass
class ReconstructionResult:
    recovered_input: np.ndarray
    recovered_label: int
    mse_vs_truth: float
    iterations: int


def gradient_from_snapshots(w_t: np.ndarray, w_t1: np.ndarray, lr: float) -> np.ndarray:
    """(w_t - w_t1) / lr: the single-step SGD inversion of two snapshots."""
    if lr <= 0:
        raise AttackError(f"learning rate must be positive, got {lr}")
    return (np.asarray(w_t, dtype=np.float64) - np.asarray(w_t1, dtype=np.float64)) / lr


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def dlg_reconstruct(
    spec: ModelSpec,
    params: np.ndarray,
    observed_gradient: np.ndarray,
    true_input: np.ndarray,
    iters: int = 2000,
    seed: int = 0,
) -> ReconstructionResult:
    """Optimize a dummy (input, soft label) until its gradient matches.

    ``params`` are the model parameters the gradient was taken at (public
    to the server in FL); ``true_input`` is used only to score the result.
    """
    iters = min(iters, ITERATION_CAP)
    d, c = spec.input_dim, spec.num_classes
    g_obs = np.asarray(observed_gradient, dtype=np.float64)
    gen = rng.generator(rng.derive_seed(seed, "dlg-init"))
    x = gen.uniform(0.0, 1.0, size=d)
    logits = gen.standard_normal(c) * 0.1

    def matching_loss(v: np.ndarray) -> float:
        g = gradient_soft_targets(spec, params, v[:d], _softmax(v[d:])[None, :])
        diff = g - g_obs
        return float(diff @ diff)

    v = np.concatenate([x, logits])
    best = matching_loss(v)
    if not math.isfinite(best):
        raise AttackError("matching objective non-finite at initialization")
    step = 0.1
    used = 0
    for it in range(iters):
        used = it + 1
        grad = np.empty_like(v)
        for j in range(v.size):
            vp = v.copy()
            vp[j] += _FD_STEP
            vm = v.copy()
            vm[j] -= _FD_STEP
            grad[j] = (matching_loss(vp) - matching_loss(vm)) / (2 * _FD_STEP)
        cand = v - step * grad
        cand[:d] = np.clip(cand[:d], 0.0, 1.0)  # attacker knows the data range
        cand_loss = matching_loss(cand)
        if cand_loss < best:
            v, best = cand, cand_loss
            step *= 1.2
        else:
            step *= 0.5
            if step < 1e-14:
                break
        if best < 1e-18:
            break
    x_hat = np.clip(v[:d], 0.0, 1.0)
    label_hat = int(np.argmax(v[d:]))
    return ReconstructionResult(
        recovered_input=x_hat,
        recovered_label=label_hat,
        mse_vs_truth=_mse(x_hat, true_input),
        iterations=used,
    )


def baseline_mse(spec: ModelSpec, trials: int, seed: int) -> float:
    """Mean MSE of a random uniform [0,1] guess against uniform truth.

    The analytic value is E(U - U')^2 = 1/6 per dimension; this calibrates
    what "the attack failed" means.
    """
    if trials < 1:
        raise AttackError("need at least one trial")
    gen = rng.generator(rng.derive_seed(seed, "baseline-mse"))
    guesses = gen.uniform(0.0, 1.0, size=(trials, spec.input_dim))
    truths = gen.uniform(0.0, 1.0, size=(trials, spec.input_dim))
    return float(np.mean((guesses - truths) ** 2))


def attack_fedrp_observation(
    spec: ModelSpec,
    z: np.ndarray,
    m: int,
    n: int,
    w_reference: np.ndarray,
    lr: float,
    true_input: np.ndarray,
    iters: int = 2000,
    seed: int = 0,
    true_matrix: ProjectionSpec | None = None,
) -> ReconstructionResult:
    """Best-effort attack on a projected message z = A w.

    The attacker does not know A: it samples a guess matrix from its own
    seed, takes the least-norm parameter estimate consistent with z, turns
    that into a pseudo-gradient against the public reference parameters,
    and runs the same inversion pipeline. Passing ``true_matrix`` models
    the ablation where A leaked (with m >= n the estimate is then exact).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (m,):
        raise AttackError(f"z must have length {m}")
    guess_spec = true_matrix if true_matrix is not None else ProjectionSpec(
        round_seed=rng.derive_seed(seed, "guess-matrix"), m=m, n=n
    )
    # least-norm solve A_hat w = z via the Gram system (m x m)
    gram = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        gram[:, j] = project(guess_spec, project_transpose(guess_spec, e))
    coeffs = np.linalg.lstsq(gram, z, rcond=None)[0]
    w_est = project_transpose(guess_spec, coeffs)
    g_est = gradient_from_snapshots(w_reference, w_est, lr)
    return dlg_reconstruct(spec, w_reference, g_est, true_input, iters=iters, seed=seed)


def run_attack_benchmark(
    num_seeds: int = 20,
    input_dim: int = 16,
    iters: int = 2000,
    m: int = 1,
    seed: int = 0,
    lr: float = 0.1,
) -> dict:
    """Paired DLG-vs-projected attack runs on the standard batch-1 harness.

    Scenario per seed: a client at public reference parameters takes one
    SGD step on one private sample. The snapshot pair leaks the exact
    gradient (DLG succeeds); the projected message leaks only z = A w with
    a secret per-round A (the same pipeline is reduced to guessing).
    """
    from scipy import stats as sstats

    from .data import uniform_dataset

    spec = ModelSpec(architecture="logistic-regression", input_dim=input_dim, num_classes=2)
    n = spec.num_params
    ds = uniform_dataset(
        n=max(64, num_seeds), dim=input_dim, classes=2, seed=rng.derive_seed(seed, "attack-data")
    )
    dlg_mses, fedrp_mses, baseline_samples = [], [], []
    for s in range(num_seeds):
        w_ref = init_params(spec, rng.derive_seed(seed, "attack-wref", s))
        x_true = ds.inputs[s]
        y_true = int(ds.labels[s])
        g_true = gradient(spec, w_ref, Batch(inputs=x_true[None, :], labels=np.array([y_true])))
        w_next = w_ref - lr * g_true  # one local SGD step; snapshots leak it exactly
        g_rec = gradient_from_snapshots(w_ref, w_next, lr)
        dlg = dlg_reconstruct(
            spec, w_ref, g_rec, x_true, iters=iters, seed=rng.derive_seed(seed, "dlg", s)
        )
        dlg_mses.append(dlg.mse_vs_truth)

        proj = ProjectionSpec(round_seed=rng.derive_seed(seed, "round-seed", s), m=m, n=n)
        z = project(proj, w_next)
        rp = attack_fedrp_observation(
            spec, z, m, n, w_ref, lr, x_true, iters=iters,
            seed=rng.derive_seed(seed, "attack-rp", s),
        )
        fedrp_mses.append(rp.mse_vs_truth)

        gen = rng.generator(rng.derive_seed(seed, "attack-baseline", s))
        guess = gen.uniform(0.0, 1.0, size=input_dim)
        baseline_samples.append(float(np.mean((guess - x_true) ** 2)))

    # one-sided: is the projected-message attack better (smaller mse) than random?
    test = sstats.mannwhitneyu(fedrp_mses, baseline_samples, alternative="less")
    return {
        "dlg_mses": dlg_mses,
        "fedrp_mses": fedrp_mses,
        "baseline_mses": baseline_samples,
        "median_dlg": float(np.median(dlg_mses)),
        "median_fedrp": float(np.median(fedrp_mses)),
        "median_baseline": float(np.median(baseline_samples)),
        "rank_test_p": float(test.pvalue),
    }

"""Privacy accounting for the projected mechanism and the Gaussian baseline.

The projected mechanism releases z = A w with A ~ N(0, v) i.i.d. entries,
so given the norms only, z ~ N(0, v ||w||^2 I_m). Its per-round guarantee
is

    epsilon = (Delta / sigma_min) * (m + sqrt(8 m ln(1/delta)))

with Delta the L2 sensitivity and sigma_min the enforced lower bound on
||w||. The Gaussian baseline's guarantee is
Delta * sqrt(2 ln(1.25/delta)) / sigma. Composition over rounds is linear.

`verify_dp_empirical` certifies the bound by Monte Carlo on the worst-case
norm pair; the density ratio depends on the norms only, so collinear
w, w' with ||w|| = sigma_min and ||w'|| = sigma_min + Delta is without
loss of generality, and the entry variance cancels from the ratio (the
analytic sampler uses v = 1; the slow matrix mode cross-checks this).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng


class PrivacyError(ValueError):
    """Invalid budget parameters or degenerate inputs."""


@dataclass(frozen=True)
class FedRpBudget:
    delta_sensitivity: float
    sigma_min: float
    m: int
    delta: float
    rounds: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise PrivacyError(f"delta must lie in (0,1), got {self.delta}")
        if self.sigma_min <= 0.0:
            raise PrivacyError(f"sigma_min must be positive, got {self.sigma_min}")
        if self.delta_sensitivity < 0.0:
            raise PrivacyError(f"sensitivity must be nonnegative, got {self.delta_sensitivity}")
        if self.m < 0:
            raise PrivacyError(f"m must be nonnegative, got {self.m}")
        if self.rounds < 1:
            raise PrivacyError(f"rounds must be >= 1, got {self.rounds}")


@dataclass(frozen=True)
class GaussianBudget:
    delta_sensitivity: float
    sigma: float
    delta: float

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise PrivacyError(f"delta must lie in (0,1), got {self.delta}")
        if self.sigma <= 0.0:
            raise PrivacyError(f"sigma must be positive, got {self.sigma}")
        if self.delta_sensitivity < 0.0:
            raise PrivacyError(f"sensitivity must be nonnegative, got {self.delta_sensitivity}")


def epsilon_fedrp(b: FedRpBudget) -> float:
    """Single-round epsilon of the projected mechanism; m = 0 releases nothing."""
    if b.m == 0:
        return 0.0
    return (b.delta_sensitivity / b.sigma_min) * (
        b.m + math.sqrt(8.0 * b.m * math.log(1.0 / b.delta))
    )


def epsilon_gaussian(b: GaussianBudget) -> float:
    """Single-round epsilon of the Gaussian mechanism."""
    return b.delta_sensitivity * math.sqrt(2.0 * math.log(1.25 / b.delta)) / b.sigma


def compose_linear(eps_per_round: float, rounds: int) -> float:
    """Linear composition: total budget over T rounds is T * epsilon."""
    if rounds < 1:
        raise PrivacyError(f"rounds must be >= 1, got {rounds}")
    return eps_per_round * rounds


def enforce_sigma_min(w: np.ndarray, sigma_min: float) -> np.ndarray:
    """Rescale w up to norm sigma_min when it falls below; identity otherwise."""
    if sigma_min <= 0.0:
        raise PrivacyError(f"sigma_min must be positive, got {sigma_min}")
    w = np.asarray(w, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise PrivacyError("zero vector: rescale direction undefined")
    if norm >= sigma_min:
        return w
    return w * (sigma_min / norm)


def log_density_ratio(
    norm_w: float, norm_w_prime: float, z: np.ndarray, entry_variance: float
) -> float:
    """log P_Z(z)/P_Z'(z) for z ~ N(0, v ||w||^2 I_m) vs N(0, v ||w'||^2 I_m)."""
    if norm_w <= 0.0 or norm_w_prime <= 0.0 or entry_variance <= 0.0:
        raise PrivacyError("norms and entry variance must be positive")
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    sq = float(z @ z)
    return m * math.log(norm_w_prime / norm_w) - (sq / 2.0) * (
        1.0 / (entry_variance * norm_w**2) - 1.0 / (entry_variance * norm_w_prime**2)
    )


@dataclass
class DpVerificationReport:
    epsilon: float
    trials: int
    upper_bound_violations: int
    lower_tail_mass: float
    lower_tail_limit: float
    passed: bool


_CHUNK = 200_000


def verify_dp_empirical(
    b: FedRpBudget,
    trials: int,
    rng_seed: int,
    epsilon: float | None = None,
    mode: str = "analytic",
    n: int | None = None,
) -> DpVerificationReport:
    """Monte-Carlo certification of the (epsilon, delta) claim.

    Adversarial pair: ||w|| = sigma_min, ||w'|| = sigma_min + Delta. Samples
    z ~ P_Z and checks (a) no log ratio exceeds epsilon (the upper bound is
    distribution-free given the norms, so violations must be exactly zero)
    and (b) the mass of log ratios below -epsilon is at most delta plus a
    3-sigma binomial margin.

    mode="analytic" draws z from its known distribution; mode="matrix"
    draws explicit A ~ N(0, 1/n) matrices and projects (slow cross-check,
    allowed from 10^3 trials).
    """
    min_trials = 10_000 if mode == "analytic" else 1_000
    if trials < min_trials:
        raise PrivacyError(f"need at least {min_trials} trials in {mode} mode, got {trials}")
    if mode not in ("analytic", "matrix"):
        raise PrivacyError(f"unknown mode {mode!r}")
    if mode == "matrix" and (n is None or n < 1):
        raise PrivacyError("matrix mode needs the ambient dimension n")
    if b.m == 0:
        raise PrivacyError("m = 0 releases nothing; nothing to verify")

    eps = epsilon_fedrp(b) if epsilon is None else float(epsilon)
    norm_w = b.sigma_min
    norm_wp = b.sigma_min + b.delta_sensitivity

    upper = 0
    lower = 0
    done = 0
    part = 0
    while done < trials:
        count = min(_CHUNK, trials - done)
        gen = rng.generator(rng.derive_seed(rng_seed, "dp-verify", part))
        if mode == "analytic":
            # v = 1 WLOG: the ratio is invariant to the entry-variance scale
            z = gen.standard_normal((count, b.m)) * norm_w
            v = 1.0
        else:
            w = np.zeros(n)
            w[0] = norm_w  # collinearity is WLOG: the densities see norms only
            a = gen.standard_normal((count, b.m, n)) / math.sqrt(n)
            z = a @ w
            v = 1.0 / n
        sq = np.einsum("ij,ij->i", z, z)
        log_ratios = b.m * math.log(norm_wp / norm_w) - (sq / 2.0) * (
            1.0 / (v * norm_w**2) - 1.0 / (v * norm_wp**2)
        )
        upper += int((log_ratios > eps).sum())
        lower += int((log_ratios < -eps).sum())
        done += count
        part += 1

    lower_mass = lower / trials
    margin = 3.0 * math.sqrt(b.delta * (1.0 - b.delta) / trials)
    limit = b.delta + margin
    return DpVerificationReport(
        epsilon=eps,
        trials=trials,
        upper_bound_violations=upper,
        lower_tail_mass=lower_mass,
        lower_tail_limit=limit,
        passed=(upper == 0 and lower_mass <= limit),
    )


@dataclass
class TailCheckEntry:
    t: float
    empirical: float
    bound: float
    limit: float
    ok: bool


@dataclass
class TailCheckReport:
    m: int
    trials: int
    entries: list[TailCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)


def chi_square_tail_check(
    m: int, t_values: list[float], trials: int, rng_seed: int = 0
) -> TailCheckReport:
    """Empirical check of Pr(Y/m - 1 >= t) <= exp(-m t^2 / 8) for Y ~ chi2(m)."""
    if m < 1:
        raise PrivacyError(f"m must be >= 1, got {m}")
    if any(t <= 0 for t in t_values):
        raise PrivacyError("t values must be positive")
    report = TailCheckReport(m=m, trials=trials)
    counts = np.zeros(len(t_values), dtype=np.int64)
    done = 0
    part = 0
    while done < trials:
        count = min(_CHUNK, trials - done)
        gen = rng.generator(rng.derive_seed(rng_seed, "chi2-tail", m, part))
        y = gen.chisquare(df=m, size=count)
        for i, t in enumerate(t_values):
            counts[i] += int((y / m - 1.0 >= t).sum())
        done += count
        part += 1
    for i, t in enumerate(t_values):
        emp = counts[i] / trials
        bound = math.exp(-m * t * t / 8.0)
        margin = 3.0 * math.sqrt(bound * (1.0 - bound) / trials)
        limit = bound + margin
        report.entries.append(
            TailCheckEntry(t=t, empirical=emp, bound=bound, limit=limit, ok=emp <= limit)
        )
    return report


def add_gaussian_noise(w: np.ndarray, sigma: float, rng_seed: int) -> np.ndarray:
    """w + N(0, sigma^2) i.i.d.; deterministic per seed."""
    if sigma < 0.0:
        raise PrivacyError(f"sigma must be nonnegative, got {sigma}")
    w = np.asarray(w, dtype=np.float64)
    if sigma == 0.0:
        return w.copy()
    gen = rng.generator(rng_seed)
    return w + gen.standard_normal(w.shape) * sigma

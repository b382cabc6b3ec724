"""Spending signals, perceived deductible position and learning about signal bias.

Before a bill arrives the household only sees a signal of each claim's OOP
cost, ``s ~ N(beta * oop, sigma_s**2)``.  Its perceived cumulative OOP
(``theta``) is billed OOP plus the signals of unbilled claims, and the
perceived marginal price is a probability-weighted mix of the full price and
the coinsurance rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import ndtr


class BeliefError(ValueError):
    pass


@dataclass(frozen=True)
class SignalParams:
    beta: float = 1.0
    sigma_s: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise BeliefError(f"beta must be positive, got {self.beta}")
        if not self.sigma_s >= 0:
            raise BeliefError(f"sigma_s must be non-negative, got {self.sigma_s}")


@dataclass(frozen=True)
class PendingClaim:
    true_oop: float
    signal: float
    consumed_week: int
    bill_week: int

    def __post_init__(self):
        if self.bill_week < self.consumed_week:
            raise BeliefError("bill cannot arrive before the service")

    def billed(self, week: int) -> bool:
        """D = 1 once the current week reaches the bill week."""
        return week >= self.bill_week


@dataclass(frozen=True)
class BetaBelief:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance >= 0:
            raise BeliefError(f"belief variance must be non-negative, got {self.variance}")


@dataclass(frozen=True)
class LearningParams:
    prior_mean: float
    prior_var: float
    signal_var: float

    def __post_init__(self):
        if self.prior_var < 0 or self.signal_var < 0:
            raise BeliefError("learning variances must be non-negative")

    def initial_belief(self) -> BetaBelief:
        return BetaBelief(self.prior_mean, self.prior_var)


def draw_signal(true_oop: float, sp: SignalParams, rng: np.random.Generator) -> float:
    return sp.beta * true_oop + sp.sigma_s * rng.standard_normal()


def perceived_theta(
    known_oop: float,
    pending: Iterable[PendingClaim],
    sigma_s: float = 0.0,
    beta: float | None = None,
) -> tuple[float, float]:
    """Mean and variance of perceived cumulative OOP.

    With ``beta=None`` the household's realised signals are used.  Passing
    ``beta`` gives the modeller's expectation instead, in which each unbilled
    claim contributes ``beta * true_oop``.  The mean is floored at zero.
    """
    pending = list(pending)
    if beta is None:
        unbilled = sum(c.signal for c in pending)
    else:
        unbilled = beta * sum(c.true_oop for c in pending)
    return max(0.0, known_oop + unbilled), len(pending) * sigma_s**2


def prob_below_deductible(theta_mean, theta_var, d):
    """Pr(theta <= d) under a normal perceived position; a step when the variance is zero."""
    theta_mean = np.asarray(theta_mean, dtype=float)
    theta_var = np.asarray(theta_var, dtype=float)
    if np.any(theta_var < 0):
        raise BeliefError("theta variance must be non-negative")
    sd = np.sqrt(theta_var)
    with np.errstate(divide="ignore", invalid="ignore"):
        smooth = ndtr((d - theta_mean) / np.where(sd > 0, sd, 1.0))
    out = np.where(sd > 0, smooth, (theta_mean <= d).astype(float))
    return float(out) if out.ndim == 0 else out


def expected_marginal_cost(p_below, k) -> float:
    p_below = np.asarray(p_below, dtype=float)
    if np.any((p_below < 0) | (p_below > 1)):
        raise BeliefError("p_below must lie in [0, 1]")
    out = p_below + (1.0 - p_below) * k.coinsurance_rate
    return float(out) if out.ndim == 0 else out


def perceived_price(theta_mean, theta_var, deductible, coinsurance):
    """Expected marginal cost as arrays; zero-deductible plans always face coinsurance."""
    p = prob_below_deductible(theta_mean, theta_var, deductible)
    p = np.where(np.asarray(deductible) > 0, p, 0.0)
    return p + (1.0 - p) * coinsurance


def update_belief(prior: BetaBelief, signal: float, lp: LearningParams) -> BetaBelief:
    """Normal-normal conjugate update of the belief about beta."""
    v0, vl = prior.variance, lp.signal_var
    if v0 == 0 and vl == 0:
        if prior.mean != signal:
            raise BeliefError("degenerate prior and signal disagree")
        return prior
    if v0 == 0 or math.isinf(vl):
        return prior
    if vl == 0 or math.isinf(v0):
        return BetaBelief(float(signal), vl)
    precision = 1.0 / v0 + 1.0 / vl
    mean = (prior.mean / v0 + signal / vl) / precision
    return BetaBelief(mean, 1.0 / precision)


def update_belief_batch(mean, var, n, signal_sum, signal_var):
    """Apply ``n`` conjugate updates at once, given the sum of the ``n`` signals.

    Sequential updates with signals l_1..l_n give the same posterior, so a
    week with several bills is handled in one step.  Arrays broadcast; a zero
    prior variance leaves the belief fixed.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    n = np.asarray(n, dtype=float)
    if signal_var == 0:
        # a noiseless signal pins the belief to the latest value
        upd = (n > 0) & (var > 0)
        new_mean = np.where(upd, signal_sum / np.maximum(n, 1), mean)
        return new_mean, np.where(upd, 0.0, var)
    live = (n > 0) & (var > 0)
    safe_var = np.where(var > 0, var, 1.0)
    prec = 1.0 / safe_var + n / signal_var
    new_mean = (mean / safe_var + signal_sum / signal_var) / prec
    return np.where(live, new_mean, mean), np.where(live, 1.0 / prec, var)


def draw_learning_signal(lp: LearningParams, rng: np.random.Generator) -> float:
    return 1.0 + math.sqrt(lp.signal_var) * rng.standard_normal()

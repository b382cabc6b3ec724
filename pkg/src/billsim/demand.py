"""Per-period spending choice under quadratic loss utility."""
from __future__ import annotations

import numpy as np


class DemandError(ValueError):
    pass


def optimal_spending(lam, omega, c_hat):
    """Spending that equates marginal utility with the perceived marginal price.

    ``m* = max(0, lambda + omega * (1 - c_hat))``.  Accepts scalars or arrays.
    """
    c_hat = np.asarray(c_hat, dtype=float)
    if np.any((c_hat < 0) | (c_hat > 1)):
        raise DemandError("perceived marginal cost must lie in [0, 1]")
    out = np.maximum(0.0, np.asarray(lam, dtype=float) + np.asarray(omega, dtype=float) * (1.0 - c_hat))
    return float(out) if out.ndim == 0 else out


def utility(m, lam, omega, oop):
    d = np.asarray(m, dtype=float) - lam
    return d - d**2 / (2.0 * omega) - oop


def household_omega(member_omegas) -> float:
    """Geometric mean of member moral-hazard parameters."""
    w = np.asarray(list(member_omegas), dtype=float)
    if w.size == 0:
        raise DemandError("household has no members")
    if np.any(w <= 0):
        raise DemandError("moral hazard parameters must be positive")
    return float(np.exp(np.mean(np.log(w))))

"""Piecewise-linear cost sharing.

The household pays the full price until its cumulative out-of-pocket (OOP)
spending reaches the deductible, a coinsurance share until OOP reaches the
OOP maximum, and nothing afterwards.  Deductible progress is tracked in OOP
dollars at the household (family) level.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

TOL = 1e-9


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class CostSharingContract:
    deductible: float
    coinsurance_rate: float
    oop_max: float
    plan_year_weeks: int = 52

    def __post_init__(self):
        if not self.deductible >= 0:
            raise ContractError(f"deductible must be >= 0, got {self.deductible}")
        if not 0.0 <= self.coinsurance_rate <= 1.0:
            raise ContractError(f"coinsurance must lie in [0, 1], got {self.coinsurance_rate}")
        if not self.oop_max >= self.deductible:
            raise ContractError(
                f"oop_max ({self.oop_max}) must be >= deductible ({self.deductible})"
            )
        if int(self.plan_year_weeks) != self.plan_year_weeks or self.plan_year_weeks < 1:
            raise ContractError(f"plan_year_weeks must be a positive integer, got {self.plan_year_weeks}")


@dataclass(frozen=True)
class SpendingPosition:
    cumulative_total: float = 0.0
    cumulative_oop: float = 0.0

    def advance(self, m: float, k: CostSharingContract) -> "SpendingPosition":
        paid = oop_cost(m, self, k)
        return replace(
            self,
            cumulative_total=self.cumulative_total + m,
            cumulative_oop=self.cumulative_oop + paid,
        )


def marginal_rate(pos: SpendingPosition, k: CostSharingContract) -> float:
    oop = pos.cumulative_oop
    if oop < k.deductible - TOL:
        return 1.0
    if oop < k.oop_max - TOL:
        return k.coinsurance_rate
    return 0.0


def remaining_deductible(pos: SpendingPosition, k: CostSharingContract) -> float:
    return max(0.0, k.deductible - pos.cumulative_oop)


def oop_cost_array(m, oop, deductible, coinsurance, oop_max):
    """Vectorised OOP cost of spending ``m`` starting at cumulative OOP ``oop``.

    All arguments broadcast.  Walks the three arms of the schedule in order;
    the result never pushes cumulative OOP above ``oop_max``.
    """
    m = np.asarray(m, dtype=float)
    oop = np.asarray(oop, dtype=float)
    room1 = np.maximum(deductible - oop, 0.0)
    room1 = np.where(room1 < TOL, 0.0, room1)
    spend1 = np.minimum(m, room1)
    rest = m - spend1
    start2 = np.maximum(oop + spend1, deductible)
    room2 = np.maximum(oop_max - start2, 0.0)
    coinsurance = np.asarray(coinsurance, dtype=float)
    safe_c = np.where(coinsurance > 0, coinsurance, 1.0)
    # with zero coinsurance the cap is never reached and the arm is free
    with np.errstate(over="ignore"):
        spend2 = np.where(coinsurance > 0, np.minimum(rest, room2 / safe_c), rest)
    paid = spend1 + coinsurance * spend2
    return np.minimum(paid, np.maximum(oop_max - oop, 0.0))


def oop_cost(m: float, pos: SpendingPosition, k: CostSharingContract) -> float:
    if m < 0:
        raise ContractError(f"spending must be non-negative, got {m}")
    return float(
        oop_cost_array(m, pos.cumulative_oop, k.deductible, k.coinsurance_rate, k.oop_max)
    )

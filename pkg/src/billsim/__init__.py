"""Household medical spending under delayed, noisy out-of-pocket price information."""

from billsim.contract import CostSharingContract, SpendingPosition, marginal_rate, oop_cost
from billsim.shocks import CellMoments, ShockCellParams, calibrate_cell
from billsim.beliefs import BetaBelief, LearningParams, SignalParams, update_belief
from billsim.demand import household_omega, optimal_spending

__version__ = "0.1.0"

__all__ = [
    "CostSharingContract",
    "SpendingPosition",
    "marginal_rate",
    "oop_cost",
    "CellMoments",
    "ShockCellParams",
    "calibrate_cell",
    "BetaBelief",
    "LearningParams",
    "SignalParams",
    "update_belief",
    "household_omega",
    "optimal_spending",
]

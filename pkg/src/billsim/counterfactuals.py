"""Spending under alternative information regimes.

Every regime reuses the baseline's random draws (health shocks, bill delays,
signal and learning noise), so a household's baseline and counterfactual
spending differ only through what it believes about its position on the
contract.  Deltas are ``baseline - counterfactual``; a positive delta means
the counterfactual regime lowers spending.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from billsim import rng as rngmod
from billsim.beliefs import LearningParams
from billsim.simulator import BillDelayDistribution, ModelParams, Population, make_draws, simulate_year

CHANGE_TOL = 1e-9  # dollars per household-year


@dataclass
class CounterfactualReport:
    """Distribution of household-year spending changes between two regimes.

    Percent deltas are relative to counterfactual spending; household-years
    whose counterfactual spending is zero are left out of the percent
    statistics and counted in ``n_zero_counterfactual``.
    """

    mode: str
    baseline: ModelParams
    counterfactual: ModelParams
    per_household: pd.DataFrame
    weekly_delta: np.ndarray  # mean delta by week, averaged over households and replicates
    n_replicates: int
    share_households_changed: float = 0.0
    share_reduced: float = 0.0
    mean_delta: float = 0.0
    median_delta: float = 0.0
    mean_pct_delta: float = float("nan")
    median_pct_delta: float = float("nan")
    n_zero_counterfactual: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        df = self.per_household
        delta = df["delta"].to_numpy()
        self.share_households_changed = float(np.mean(np.abs(delta) > CHANGE_TOL)) if len(df) else 0.0
        self.share_reduced = float(np.mean(delta > CHANGE_TOL)) if len(df) else 0.0
        self.mean_delta = float(delta.mean()) if len(df) else 0.0
        self.median_delta = float(np.median(delta)) if len(df) else 0.0
        pct = df["pct_delta"].dropna().to_numpy()
        self.n_zero_counterfactual = int(df["pct_delta"].isna().sum())
        if pct.size:
            self.mean_pct_delta = float(pct.mean())
            self.median_pct_delta = float(np.median(pct))

    def subset(self, mask) -> "CounterfactualReport":
        """Report restricted to a subset of household-years (boolean mask over rows)."""
        return CounterfactualReport(self.mode, self.baseline, self.counterfactual,
                                    self.per_household.loc[np.asarray(mask, bool)].reset_index(drop=True),
                                    self.weekly_delta, self.n_replicates)

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "n_household_years": int(len(self.per_household)),
            "n_replicates": self.n_replicates,
            "share_households_changed": self.share_households_changed,
            "share_reduced": self.share_reduced,
            "mean_delta": self.mean_delta,
            "median_delta": self.median_delta,
            "mean_pct_delta": self.mean_pct_delta,
            "median_pct_delta": self.median_pct_delta,
            "n_zero_counterfactual": self.n_zero_counterfactual,
            "mean_baseline_spend": float(self.per_household["baseline_spend"].mean()),
            "mean_counterfactual_spend": float(self.per_household["counterfactual_spend"].mean()),
            "weekly_mean_delta": self.weekly_delta.tolist(),
            **self.extra,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, allow_nan=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        self.per_household.to_csv(path, index=False, float_format="%.2f", lineterminator="\n")


def compare(pop: Population, baseline: ModelParams, counterfactual: ModelParams, seed: int,
            n_replicates: int = 1, delays: BillDelayDistribution | None = None, mode: str = "custom",
            years: int = 1) -> CounterfactualReport:
    """Simulate both regimes on identical draws and tabulate household-year deltas.

    Spending is averaged over replicates within each household-year before
    the deltas are formed.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    delays = delays or BillDelayDistribution.geometric()
    H, T = pop.size, pop.weeks
    base_tot = np.zeros((years, H))
    cf_tot = np.zeros((years, H))
    base_oop = np.zeros((years, H))
    weekly = np.zeros(T)
    checks = []
    for r in range(n_replicates):
        for y in range(years):
            draws = make_draws(pop, seed, r, y)
            checks.append(draws.checksum())
            b = simulate_year(pop, baseline, draws, delays)
            c = simulate_year(pop, counterfactual, draws, delays)
            base_tot[y] += b.spend.sum(axis=1)
            cf_tot[y] += c.spend.sum(axis=1)
            base_oop[y] += b.oop.sum(axis=1)
            weekly += (b.spend - c.spend).mean(axis=0)
    base_tot /= n_replicates
    cf_tot /= n_replicates
    base_oop /= n_replicates
    weekly /= n_replicates * years

    delta = base_tot - cf_tot
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = np.where(cf_tot > 0, 100.0 * delta / cf_tot, np.nan)
    df = pd.DataFrame({
        "household_id": np.tile(pop.household_ids, years),
        "year_index": np.repeat(np.arange(years), H),
        "deductible": np.tile(pop.deductible, years),
        "baseline_oop": base_oop.ravel(),
        "met_deductible": (base_oop.ravel() >= np.tile(pop.deductible, years) - 1e-9),
        "baseline_spend": base_tot.ravel(),
        "counterfactual_spend": cf_tot.ravel(),
        "delta": delta.ravel(),
        "pct_delta": pct.ravel(),
    })
    extra = {"draws_checksum": rngmod.checksum(np.frombuffer("".join(checks).encode(), dtype=np.uint8))}
    return CounterfactualReport(mode, baseline, counterfactual, df, weekly, n_replicates, extra=extra)


def recenter_beta(params: ModelParams, pop: Population, seed: int, **kw) -> CounterfactualReport:
    """Baseline at the fitted bias against the same model with unbiased signals (beta = 1)."""
    return compare(pop, params, replace(params, beta=1.0), seed, mode="recenter", **kw)


def full_information(params: ModelParams, pop: Population, seed: int, **kw) -> CounterfactualReport:
    """Baseline against unbiased, noiseless signals and bills that arrive at once."""
    cf = ModelParams(beta=1.0, sigma_s=0.0, learning=None, instant_bills=True)
    return compare(pop, params, cf, seed, mode="fullinfo", **kw)


def learning_counterfactual(params: ModelParams, pop: Population, seed: int, **kw) -> CounterfactualReport:
    """Learning baseline against households certain that signals are unbiased."""
    if params.learning is None:
        raise ValueError("learning counterfactual needs learning parameters")
    cf = replace(params, learning=LearningParams(1.0, 0.0, params.learning.signal_var))
    return compare(pop, params, cf, seed, mode="learning", **kw)


COUNTERFACTUALS = {
    "recenter": recenter_beta,
    "fullinfo": full_information,
    "learning": learning_counterfactual,
}

"""Weekly health shocks drawn from shifted lognormal distributions.

A cell's shock satisfies ``log(lambda - kappa) ~ N(mu, sigma**2)``.  Cells are
calibrated from three summary statistics of weekly spending: mean, median and
standard deviation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ShockCellParams:
    mu: float
    sigma: float
    kappa: float
    cell_id: Hashable = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise CalibrationError(f"sigma must be positive, got {self.sigma}")
        if not math.isfinite(math.exp(self.mu + 0.5 * self.sigma**2) + self.kappa):
            raise CalibrationError("implied mean is not finite")

    @property
    def mean(self) -> float:
        return math.exp(self.mu + 0.5 * self.sigma**2) + self.kappa

    @property
    def median(self) -> float:
        return math.exp(self.mu) + self.kappa

    @property
    def variance(self) -> float:
        """Exact variance of the shifted lognormal (the shift does not enter)."""
        s2 = self.sigma**2
        return math.expm1(s2) * math.exp(2 * self.mu + s2)


@dataclass(frozen=True)
class CellMoments:
    mean: float
    median: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise CalibrationError(f"sd must be positive, got {self.sd}")
        if not self.mean > 0:
            raise CalibrationError(f"mean must be positive, got {self.mean}")
        if not self.mean > self.median:
            raise CalibrationError(
                f"mean ({self.mean}) must exceed median ({self.median}); "
                "no right-skewed shifted lognormal matches these moments"
            )


def calibrate_cell(mom: CellMoments, cell_id: Hashable = None, cv_rule: str = "moment") -> ShockCellParams:
    """Solve for (mu, sigma, kappa) matching ``mom``.

    ``cv_rule="moment"`` uses the coefficient-of-variation identity
    ``sd/mean = sqrt(exp(sigma^2) - 1)`` together with the mean and median
    equations, which has the closed form

        sigma^2 = log(1 + (sd/mean)^2)
        mu      = log((mean - median) / (exp(sigma^2/2) - 1))
        kappa   = median - exp(mu)

    That identity ignores the shift, so the sd of the fitted distribution is
    ``(mean - kappa) / mean`` times the target.  ``cv_rule="exact"`` instead
    matches the true sd of the shifted distribution (solved numerically).
    """
    if not isinstance(mom, CellMoments):
        mom = CellMoments(*mom)
    gap = mom.mean - mom.median
    if cv_rule == "moment":
        s2 = math.log1p((mom.sd / mom.mean) ** 2)
    elif cv_rule == "exact":
        # r(s2) = sd / (mean - median) is U-shaped in s2 with its minimum near
        # s2 = 0.962; the right-skewed branch (s2 beyond the minimum) is used.
        target = mom.sd / gap
        f = lambda s2: math.exp(0.5 * s2) * math.sqrt(math.expm1(s2)) / math.expm1(0.5 * s2) - target
        lo = minimize_scalar(f, bounds=(1e-6, 20.0), method="bounded", options={"xatol": 1e-12}).x
        if f(lo) > 0:
            raise CalibrationError(
                f"sd/(mean - median) = {target:.4f} is below the shifted-lognormal minimum {target + f(lo):.4f}"
            )
        hi = max(2.0 * lo, 2.0)
        while f(hi) < 0:
            hi *= 2.0
        s2 = brentq(f, lo, hi, xtol=1e-14, rtol=1e-14)
    else:
        raise ValueError(f"unknown cv_rule {cv_rule!r}")
    mu = math.log(gap / math.expm1(0.5 * s2))
    kappa = mom.median - math.exp(mu)
    return ShockCellParams(mu=mu, sigma=math.sqrt(s2), kappa=kappa, cell_id=cell_id)


def analytic_moments(p: ShockCellParams) -> CellMoments:
    """Moments implied by ``p`` under the same identities used by ``calibrate_cell``."""
    mean = p.mean
    return CellMoments(mean=mean, median=p.median, sd=mean * math.sqrt(math.expm1(p.sigma**2)))


def shock_from_normal(z, mu, sigma, kappa):
    return kappa + np.exp(mu + sigma * np.asarray(z))


def sample_shock(p: ShockCellParams, rng: np.random.Generator, size=None):
    z = rng.standard_normal(size)
    out = shock_from_normal(z, p.mu, p.sigma, p.kappa)
    return float(out) if size is None else out


def household_shock(members: Sequence[ShockCellParams], rng: np.random.Generator, size=None):
    if len(members) == 0:
        raise ValueError("household has no members")
    total = 0.0
    for p in members:
        total = total + sample_shock(p, rng, size)
    return total


def load_cell_table(path, cv_rule: str = "moment") -> dict:
    """Read a CSV with columns cell_id, mean, median, sd into calibrated cells."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cell table not found: {path}")
    cells = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"cell_id", "mean", "median", "sd"} - set(reader.fieldnames or [])
        if missing:
            raise CalibrationError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                mom = CellMoments(float(row["mean"]), float(row["median"]), float(row["sd"]))
                cells[row["cell_id"]] = calibrate_cell(mom, row["cell_id"], cv_rule)
            except CalibrationError as exc:
                raise CalibrationError(f"{path}:{lineno}: {exc}") from None
    return cells

"""Weekly household simulation under delayed bills.

Each plan-year week runs the same four steps for every household:

1. form the perceived cumulative OOP from billed amounts plus signals of
   unbilled claims, and from it the perceived marginal price;
2. draw the household health shock (sum of member shocks);
3. choose spending, pay the true OOP cost, and file a claim whose bill is
   dated ``tau`` weeks later;
4. open the bills that inform next week's decision.

A bill dated week ``b`` informs decisions from week ``b`` on.  A claim cannot
inform the decision of the week in which it is consumed, so a same-week bill
(``tau = 0``) is first used in the following week, exactly like ``tau = 1``.

The engine is vectorised across households.  All randomness comes from a
:class:`Draws` bundle keyed by ``(seed, replicate)`` and is independent of
the model parameters, so any two parameter settings simulated with the same
bundle share shocks, delays and signal noise (common random numbers).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from billsim import rng as rngmod
from billsim.beliefs import (
    BetaBelief,
    LearningParams,
    PendingClaim,
    perceived_price,
    update_belief,
    update_belief_batch,
)
from billsim.contract import CostSharingContract, SpendingPosition, oop_cost_array
from billsim.demand import household_omega, optimal_spending
from billsim.shocks import CellMoments, ShockCellParams, calibrate_cell, shock_from_normal

PANEL_COLUMNS = (
    "household_id",
    "year",
    "week",
    "spend_per_person",
    "n_members",
    "post_service",
    "post_bill",
    "shoppable_flag",
    "true_oop_week",
    "perceived_theta_mean",
    "claim_bill_week",
)
MONEY_COLUMNS = ("spend_per_person", "true_oop_week", "perceived_theta_mean")


# ---------------------------------------------------------------------------
# bill delays
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BillDelayDistribution:
    pmf: tuple

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=float)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0):
            raise ValueError("delay pmf must be a non-empty vector of non-negative weights")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"delay pmf sums to {p.sum():.15f}, expected 1")
        object.__setattr__(self, "pmf", tuple(float(x) for x in p))

    @property
    def max_delay(self) -> int:
        return len(self.pmf) - 1

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.pmf)
        c[-1] = 1.0
        return c

    def quantile(self, u) -> np.ndarray:
        """Map uniforms to delays by inverse CDF."""
        return np.searchsorted(self.cdf, np.asarray(u), side="right").clip(max=self.max_delay)

    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.pmf)), self.pmf))

    @classmethod
    def geometric(cls, share_within: float = 0.60, within_weeks: int = 4, max_delay: int = 26):
        """Truncated geometric pmf with Pr(tau <= within_weeks) = share_within after truncation."""
        k = np.arange(max_delay + 1)

        def gap(q):
            w = q**k
            return w[: within_weeks + 1].sum() / w.sum() - share_within

        q = brentq(gap, 1e-9, 1 - 1e-12, xtol=1e-15)
        w = q**k
        return cls(tuple(w / w.sum()))

    @classmethod
    def from_csv(cls, path):
        """Read a pmf from a CSV with columns ``delay_weeks, probability``."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"delay pmf file not found: {path}")
        df = pd.read_csv(path)
        if not {"delay_weeks", "probability"} <= set(df.columns):
            raise ValueError(f"{path}: expected columns delay_weeks, probability")
        top = int(df["delay_weeks"].max())
        p = np.zeros(top + 1)
        np.add.at(p, df["delay_weeks"].astype(int).to_numpy(), df["probability"].to_numpy(float))
        return cls(tuple(p / p.sum()))

    @classmethod
    def point_mass(cls, tau: int):
        p = np.zeros(tau + 1)
        p[tau] = 1.0
        return cls(tuple(p))


# ---------------------------------------------------------------------------
# population
# ---------------------------------------------------------------------------

AGE_BANDS = ("0-17", "18-34", "35-49", "50-64")
SEXES = ("F", "M")
RISK_QUARTILES = (1, 2, 3, 4)


def default_cell_moments(scale: float = 1.0, median_ratio: float = -1.0, sd_ratio: float = 3.0) -> dict:
    """Synthetic weekly-spending moments for 4 age bands x 2 sexes x 4 risk quartiles.

    Medians are negative so that a majority of person-weeks carry a shock
    below zero (no spending at the full price).
    """
    base = {"0-17": 7.0, "18-34": 8.5, "35-49": 11.0, "50-64": 16.0}
    sex_mult = {"F": 1.1, "M": 0.9}
    risk_mult = {1: 0.45, 2: 0.75, 3: 1.1, 4: 1.7}
    out = {}
    for a in AGE_BANDS:
        for s in SEXES:
            for q in RISK_QUARTILES:
                mean = scale * base[a] * sex_mult[s] * risk_mult[q]
                out[f"{a}|{s}|q{q}"] = CellMoments(mean=mean, median=median_ratio * mean, sd=sd_ratio * mean)
    return out


@dataclass
class PopulationConfig:
    n_households: int = 2000
    size_pmf: dict = field(default_factory=lambda: {2: 0.35, 3: 0.25, 4: 0.25, 5: 0.15})
    cell_moments: dict = field(default_factory=default_cell_moments)
    cell_weights: dict | None = None
    contracts: Sequence[CostSharingContract] = (CostSharingContract(1000.0, 0.2, 6000.0),)
    contract_weights: Sequence[float] | None = None
    omega_log_mean: float = math.log(300.0)
    omega_log_sd: float = 0.5
    cv_rule: str = "moment"

    def __post_init__(self):
        if self.n_households < 1:
            raise ValueError("n_households must be positive")
        sizes = np.asarray(list(self.size_pmf.keys()))
        probs = np.asarray(list(self.size_pmf.values()), dtype=float)
        if np.any(sizes < 1) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
            raise ValueError("size_pmf must map positive sizes to probabilities summing to 1")
        if len(self.contracts) == 0:
            raise ValueError("contract menu is empty")
        weeks = {k.plan_year_weeks for k in self.contracts}
        if len(weeks) != 1:
            raise ValueError("all contracts in a menu must share plan_year_weeks")

    @property
    def mean_size(self) -> float:
        return float(sum(k * v for k, v in self.size_pmf.items()))


@dataclass
class Population:
    """Households with member cells, moral-hazard draws and an assigned contract."""

    household_ids: np.ndarray  # (H,)
    n_members: np.ndarray  # (H,)
    member_cell: np.ndarray  # (H, M) index into ``cells``, -1 when empty
    member_omega: np.ndarray  # (H, M), nan when empty
    contract_index: np.ndarray  # (H,)
    cells: list
    contracts: list

    def __post_init__(self):
        self.omega = np.exp(np.nanmean(np.log(self.member_omega), axis=1))
        mu = np.array([c.mu for c in self.cells])
        sg = np.array([c.sigma for c in self.cells])
        kp = np.array([c.kappa for c in self.cells])
        mask = self.member_cell >= 0
        idx = np.where(mask, self.member_cell, 0)
        self.member_mask = mask
        self.member_mu = np.where(mask, mu[idx], 0.0)
        self.member_sigma = np.where(mask, sg[idx], 0.0)
        self.member_kappa = np.where(mask, kp[idx], 0.0)
        d = np.array([k.deductible for k in self.contracts])
        c = np.array([k.coinsurance_rate for k in self.contracts])
        x = np.array([k.oop_max for k in self.contracts])
        self.deductible = d[self.contract_index]
        self.coinsurance = c[self.contract_index]
        self.oop_max = x[self.contract_index]

    @property
    def size(self) -> int:
        return len(self.household_ids)

    @property
    def max_members(self) -> int:
        return self.member_cell.shape[1]

    @property
    def weeks(self) -> int:
        return self.contracts[0].plan_year_weeks

    def subset(self, idx) -> "Population":
        idx = np.asarray(idx)
        return Population(
            self.household_ids[idx],
            self.n_members[idx],
            self.member_cell[idx],
            self.member_omega[idx],
            self.contract_index[idx],
            self.cells,
            self.contracts,
        )

    def expected_household_shock(self) -> np.ndarray:
        mean = np.exp(self.member_mu + 0.5 * self.member_sigma**2) + self.member_kappa
        return np.where(self.member_mask, mean, 0.0).sum(axis=1)

    def to_csv(self, path) -> None:
        """One row per member: household_id, member, cell_id, omega, deductible, coinsurance, oop_max."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["household_id", "member", "cell_id", "omega", "deductible", "coinsurance", "oop_max"])
            for h in range(self.size):
                k = self.contracts[self.contract_index[h]]
                for j in range(self.n_members[h]):
                    w.writerow([
                        int(self.household_ids[h]), j, self.cells[self.member_cell[h, j]].cell_id,
                        repr(float(self.member_omega[h, j])), k.deductible, k.coinsurance_rate, k.oop_max,
                    ])

    @classmethod
    def from_csv(cls, path, cells: dict, weeks: int = 52) -> "Population":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"population file not found: {path}")
        df = pd.read_csv(path)
        cell_list = list(cells.values())
        cell_pos = {cid: i for i, cid in enumerate(cells)}
        unknown = set(df["cell_id"].astype(str)) - set(cell_pos)
        if unknown:
            raise ValueError(f"{path}: unknown cell ids {sorted(unknown)[:5]}")
        hh = df.groupby("household_id", sort=True)
        ids = np.array(sorted(hh.groups))
        n = hh.size().loc[ids].to_numpy()
        M = int(n.max())
        cell = np.full((len(ids), M), -1)
        om = np.full((len(ids), M), np.nan)
        contracts, cidx = [], np.zeros(len(ids), dtype=int)
        keyed = {}
        for i, (hid, g) in enumerate(hh):
            g = g.sort_values("member")
            cell[i, : len(g)] = [cell_pos[str(c)] for c in g["cell_id"]]
            om[i, : len(g)] = g["omega"].to_numpy(float)
            key = (float(g["deductible"].iloc[0]), float(g["coinsurance"].iloc[0]), float(g["oop_max"].iloc[0]))
            if key not in keyed:
                keyed[key] = len(contracts)
                contracts.append(CostSharingContract(*key, plan_year_weeks=weeks))
            cidx[i] = keyed[key]
        return cls(ids, n, cell, om, cidx, cell_list, contracts)


def generate_population(config: PopulationConfig, seed: int) -> Population:
    """Draw household sizes, member cells, moral-hazard parameters and contracts."""
    g = rngmod.stream(seed, 0, "population")
    H = config.n_households
    sizes = np.array(list(config.size_pmf.keys()), dtype=int)
    sp = np.array(list(config.size_pmf.values()), dtype=float)
    n = g.choice(sizes, size=H, p=sp / sp.sum())
    M = int(sizes.max())

    cells = {cid: calibrate_cell(m, cid, config.cv_rule) for cid, m in config.cell_moments.items()}
    cell_list = list(cells.values())
    if config.cell_weights is None:
        cw = np.full(len(cell_list), 1.0 / len(cell_list))
    else:
        cw = np.array([config.cell_weights.get(cid, 0.0) for cid in cells], dtype=float)
        cw = cw / cw.sum()
    member_cell = g.choice(len(cell_list), size=(H, M), p=cw)
    member_omega = np.exp(config.omega_log_mean + config.omega_log_sd * g.standard_normal((H, M)))
    empty = np.arange(M)[None, :] >= n[:, None]
    member_cell[empty] = -1
    member_omega[empty] = np.nan

    kw = config.contract_weights
    kw = np.full(len(config.contracts), 1.0 / len(config.contracts)) if kw is None else np.asarray(kw, float)
    contract_index = g.choice(len(config.contracts), size=H, p=kw / kw.sum())
    return Population(
        household_ids=np.arange(1, H + 1),
        n_members=n,
        member_cell=member_cell,
        member_omega=member_omega,
        contract_index=contract_index,
        cells=cell_list,
        contracts=list(config.contracts),
    )


# ---------------------------------------------------------------------------
# parameters and random draws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    """Information regime of a simulation.

    ``learning`` switches from a fixed signal bias ``beta`` to household
    beliefs about the bias that are updated whenever a bill is opened.
    ``instant_bills`` forces every delay to zero.
    """

    beta: float = 1.0
    sigma_s: float = 0.0
    learning: LearningParams | None = None
    instant_bills: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.sigma_s >= 0:
            raise ValueError(f"sigma_s must be non-negative, got {self.sigma_s}")


@dataclass
class Draws:
    """Parameter-free random inputs for one population, replicate and year."""

    shock_z: np.ndarray  # (H, M, T)
    delay_u: np.ndarray  # (H, T)
    signal_z: np.ndarray  # (H, T)
    learn_z: np.ndarray  # (H, T)
    prior_z: np.ndarray  # (H,)

    def checksum(self) -> str:
        return rngmod.checksum(self.shock_z, self.delay_u, self.signal_z, self.learn_z, self.prior_z)


def make_draws(pop: Population, seed: int, replicate: int, year: int = 0) -> Draws:
    H, M, T = pop.size, pop.max_members, pop.weeks
    tag = f"y{year}"
    return Draws(
        shock_z=rngmod.stream(seed, replicate, "shock" + tag).standard_normal((H, M, T)),
        delay_u=rngmod.stream(seed, replicate, "delay" + tag).random((H, T)),
        signal_z=rngmod.stream(seed, replicate, "signal" + tag).standard_normal((H, T)),
        learn_z=rngmod.stream(seed, replicate, "learn" + tag).standard_normal((H, T)),
        prior_z=rngmod.stream(seed, replicate, "prior" + tag).standard_normal(H),
    )


def household_shocks(pop: Population, shock_z: np.ndarray) -> np.ndarray:
    lam = shock_from_normal(shock_z, pop.member_mu[..., None], pop.member_sigma[..., None], pop.member_kappa[..., None])
    return np.where(pop.member_mask[..., None], lam, 0.0).sum(axis=1)


# ---------------------------------------------------------------------------
# vectorised engine
# ---------------------------------------------------------------------------


@dataclass
class YearResult:
    spend: np.ndarray  # (H, T) household spending
    oop: np.ndarray  # (H, T) true OOP paid for the week's claim
    theta_mean: np.ndarray  # (H, T) perceived cumulative OOP used for the decision
    c_hat: np.ndarray  # (H, T)
    has_claim: np.ndarray  # (H, T)
    bill_week: np.ndarray  # (H, T) week the claim's bill is dated (1-based)
    belief_mean: np.ndarray  # (H, T) signal bias in force at each decision
    resolved_oop: np.ndarray  # (H,) OOP of all bills opened by the end of the epilogue
    true_oop_total: np.ndarray  # (H,)


def simulate_year(pop: Population, params: ModelParams, draws: Draws, delays: BillDelayDistribution) -> YearResult:
    H, T = pop.size, pop.weeks
    d, c, cap, omega = pop.deductible, pop.coinsurance, pop.oop_max, pop.omega
    lam = household_shocks(pop, draws.shock_z)
    tau = np.zeros((H, T), dtype=int) if params.instant_bills else delays.quantile(draws.delay_u)
    horizon = T + delays.max_delay + 3

    arrive_oop = np.zeros((H, horizon))
    arrive_noise = np.zeros((H, horizon))
    arrive_n = np.zeros((H, horizon))
    arrive_learn = np.zeros((H, horizon))

    known = np.zeros(H)
    cum_oop = np.zeros(H)
    pend_oop = np.zeros(H)
    pend_noise = np.zeros(H)
    pend_n = np.zeros(H)

    lp = params.learning
    if lp is not None:
        b_mean = lp.prior_mean + math.sqrt(lp.prior_var) * draws.prior_z
        b_var = np.full(H, lp.prior_var)
        sd_l = math.sqrt(lp.signal_var)
    else:
        b_mean = np.full(H, params.beta)

    out = {k: np.zeros((H, T)) for k in ("spend", "oop", "theta", "chat", "belief")}
    has = np.zeros((H, T), dtype=bool)
    bill = np.zeros((H, T), dtype=int)
    sig = params.sigma_s

    for t in range(T):
        week = t + 1
        # bills dated this week (or earlier same-week bills) are now known
        a = arrive_oop[:, week]
        known += a
        pend_oop -= a
        pend_noise -= arrive_noise[:, week]
        n_open = arrive_n[:, week]
        pend_n -= n_open
        if lp is not None:
            b_mean, b_var = update_belief_batch(b_mean, b_var, n_open, arrive_learn[:, week], lp.signal_var)

        # 1. perceived position and price
        theta = np.maximum(0.0, known + b_mean * pend_oop + sig * pend_noise)
        var = np.maximum(pend_n, 0.0) * sig**2
        c_hat = perceived_price(theta, var, d, c)
        # 2-3. shock, spending, true OOP, claim filing
        m = optimal_spending(lam[:, t], omega, c_hat)
        paid = oop_cost_array(m, cum_oop, d, c, cap)
        cum_oop += paid
        claim = m > 0
        b_week = week + tau[:, t]
        first_use = np.maximum(b_week, week + 1)
        rows = np.flatnonzero(claim)
        cols = first_use[rows]
        arrive_oop[rows, cols] += paid[rows]
        arrive_noise[rows, cols] += draws.signal_z[rows, t]
        arrive_n[rows, cols] += 1
        if lp is not None:
            arrive_learn[rows, cols] += 1.0 + sd_l * draws.learn_z[rows, t]
        pend_oop += np.where(claim, paid, 0.0)
        pend_noise += np.where(claim, draws.signal_z[:, t], 0.0)
        pend_n += claim

        out["spend"][:, t] = m
        out["oop"][:, t] = paid
        out["theta"][:, t] = theta
        out["chat"][:, t] = c_hat
        out["belief"][:, t] = b_mean
        has[:, t] = claim
        bill[:, t] = b_week

    # epilogue: every remaining bill is eventually opened
    resolved = arrive_oop.sum(axis=1)
    return YearResult(
        spend=out["spend"],
        oop=out["oop"],
        theta_mean=out["theta"],
        c_hat=out["chat"],
        has_claim=has,
        bill_week=bill,
        belief_mean=out["belief"],
        resolved_oop=resolved,
        true_oop_total=cum_oop,
    )


# ---------------------------------------------------------------------------
# scalar reference path
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Claim(PendingClaim):
    bias: float = 1.0
    learn: float = 1.0


@dataclass(frozen=True)
class WeekDraws:
    member_z: tuple
    delay: int
    signal_z: float
    learn_z: float = 0.0


@dataclass
class HouseholdState:
    contract: CostSharingContract
    omega: float
    members: list  # ShockCellParams
    position: SpendingPosition = field(default_factory=SpendingPosition)
    known_oop: float = 0.0
    pending: list = field(default_factory=list)
    belief: BetaBelief | None = None

    @property
    def cumulative_true_oop(self) -> float:
        return self.position.cumulative_oop


@dataclass(frozen=True)
class WeekRecord:
    week: int
    spend: float
    oop: float
    theta_mean: float
    c_hat: float
    bill_week: int | None


def new_household(contract, member_cells, member_omegas, params: ModelParams, prior_z: float = 0.0) -> HouseholdState:
    belief = None
    if params.learning is not None:
        lp = params.learning
        belief = BetaBelief(lp.prior_mean + math.sqrt(lp.prior_var) * prior_z, lp.prior_var)
    return HouseholdState(contract, household_omega(member_omegas), list(member_cells), belief=belief)


def step_week(state: HouseholdState, week: int, params: ModelParams, draws) -> tuple:
    """Advance one household by one week.

    ``draws`` is either a :class:`WeekDraws` or a ``numpy`` Generator from
    which one is drawn (member shocks, delay index into a geometric default,
    signal noise, learning noise).
    """
    k = state.contract
    if not 1 <= week <= k.plan_year_weeks:
        raise ValueError(f"week must lie in 1..{k.plan_year_weeks}")
    if isinstance(draws, np.random.Generator):
        g = draws
        draws = WeekDraws(
            tuple(g.standard_normal(len(state.members))),
            int(BillDelayDistribution.geometric().quantile(g.random())),
            g.standard_normal(),
            g.standard_normal(),
        )
    bias = state.belief.mean if state.belief is not None else params.beta

    # 1. perceived position
    unbilled = sum(bias * p.true_oop + p.signal - p.bias * p.true_oop for p in state.pending)
    theta = max(0.0, state.known_oop + unbilled)
    var = len(state.pending) * params.sigma_s**2
    c_hat = float(perceived_price(theta, var, k.deductible, k.coinsurance_rate))
    # 2. shock
    lam = sum(float(shock_from_normal(z, p.mu, p.sigma, p.kappa)) for z, p in zip(draws.member_z, state.members))
    # 3. choice, true cost, claim
    m = float(optimal_spending(lam, state.omega, c_hat))
    paid = float(oop_cost_array(m, state.position.cumulative_oop, k.deductible, k.coinsurance_rate, k.oop_max))
    state.position = SpendingPosition(state.position.cumulative_total + m, state.position.cumulative_oop + paid)
    bill_week = None
    if m > 0:
        tau = 0 if params.instant_bills else draws.delay
        bill_week = week + tau
        claim = _Claim(
            true_oop=paid,
            signal=bias * paid + params.sigma_s * draws.signal_z,
            consumed_week=week,
            bill_week=bill_week,
            bias=bias,
            learn=(1.0 + math.sqrt(params.learning.signal_var) * draws.learn_z) if params.learning else 1.0,
        )
        state.pending.append(claim)
    # 4. open bills that inform next week's decision
    still = []
    for p in state.pending:
        if p.bill_week <= week + 1:
            state.known_oop += p.true_oop
            if state.belief is not None:
                state.belief = update_belief(state.belief, p.learn, params.learning)
        else:
            still.append(p)
    state.pending = still
    return state, WeekRecord(week, m, paid, theta, c_hat, bill_week)



# ---------------------------------------------------------------------------
# panels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventSpec:
    """Index-event proxy: the first claim with spending at or above a threshold.

    ``threshold=None`` uses the ``quantile`` of household weekly spending in
    the panel.
    """

    threshold: float | None = None
    quantile: float = 0.75


def year_to_frame(pop: Population, res: YearResult, year: int) -> pd.DataFrame:
    H, T = res.spend.shape
    n = np.repeat(pop.n_members, T)
    bill = np.where(res.has_claim, res.bill_week, -1).ravel()
    return pd.DataFrame({
        "household_id": np.repeat(pop.household_ids, T),
        "year": np.full(H * T, year),
        "week": np.tile(np.arange(1, T + 1), H),
        "spend_per_person": res.spend.ravel() / n,
        "n_members": n,
        "post_service": 0,
        "post_bill": 0,
        "shoppable_flag": 0,
        "true_oop_week": res.oop.ravel(),
        "perceived_theta_mean": res.theta_mean.ravel(),
        "claim_bill_week": pd.array(np.where(bill >= 0, bill, None), dtype="Int64"),
    })


def simulate_panel(
    pop: Population,
    params: ModelParams,
    seed: int,
    replicate_id: int = 0,
    delays: BillDelayDistribution | None = None,
    years: Sequence[int] = (2012,),
    event_spec: EventSpec | None = EventSpec(),
    return_results: bool = False,
):
    """One record per household-week; deterministic in ``(seed, replicate_id)``."""
    delays = delays or BillDelayDistribution.geometric()
    frames, results = [], []
    for i, y in enumerate(years):
        res = simulate_year(pop, params, make_draws(pop, seed, replicate_id, i), delays)
        results.append(res)
        frames.append(year_to_frame(pop, res, y))
    panel = pd.concat(frames, ignore_index=True) if len(frames) > 1 else frames[0]
    panel = panel.sort_values(["household_id", "year", "week"], kind="stable").reset_index(drop=True)
    if event_spec is not None:
        panel = mark_index_events(panel, event_spec)
    return (panel, results) if return_results else panel


def mark_index_events(panel: pd.DataFrame, event_spec: EventSpec = EventSpec()) -> pd.DataFrame:
    """Set post_service / post_bill / shoppable_flag from each household-year's first qualifying claim."""
    df = panel.copy()
    spend = df["spend_per_person"].to_numpy(float) * df["n_members"].to_numpy(float)
    thr = event_spec.threshold
    if thr is None:
        thr = float(np.quantile(spend, event_spec.quantile)) if len(spend) else 0.0
    bill = df["claim_bill_week"]
    qualifies = (spend >= thr) & (spend > 0) & bill.notna().to_numpy()
    df["_q"] = qualifies
    keys = ["household_id", "year"]
    week = df["week"].to_numpy()
    first = df["week"].where(df["_q"]).groupby([df[k] for k in keys]).transform("min")
    service = first.to_numpy(float)
    idx_row = (week == service)
    bill_of_index = pd.Series(np.where(idx_row, bill.fillna(-1).to_numpy(float), np.nan))
    bw = bill_of_index.groupby([df[k].to_numpy() for k in keys]).transform("max").to_numpy()
    has = ~np.isnan(service)
    df["post_service"] = (has & (week >= np.nan_to_num(service, nan=np.inf))).astype(int)
    df["post_bill"] = (has & (week >= np.nan_to_num(bw, nan=np.inf))).astype(int)
    df["shoppable_flag"] = idx_row.astype(int)
    return df.drop(columns="_q")


def index_events(panel: pd.DataFrame) -> pd.DataFrame:
    """Service and bill week of each household-year's index event."""
    idx = panel.loc[panel["shoppable_flag"] == 1, ["household_id", "year", "week", "claim_bill_week"]]
    return idx.rename(columns={"week": "service_week", "claim_bill_week": "bill_week"}).reset_index(drop=True)


def write_panel(panel: pd.DataFrame, path) -> None:
    """CSV with the panel columns in canonical order; money at 2 decimals."""
    df = panel.loc[:, list(PANEL_COLUMNS)].copy()
    for col in MONEY_COLUMNS:
        df[col] = df[col].map(lambda v: f"{v:.2f}")
    df.to_csv(path, index=False, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)


def read_panel(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"panel file not found: {path}")
    df = pd.read_csv(path, dtype={"claim_bill_week": "Int64"})
    missing = [c for c in PANEL_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing panel columns {missing}")
    return df.sort_values(["household_id", "year", "week"], kind="stable").reset_index(drop=True)

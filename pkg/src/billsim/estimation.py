"""Grid-search estimation of the signal parameters.

The objective compares observed weekly household spending with model
predictions and takes the median RMSE over simulation replicates.  Two
prediction modes are offered.

``"conditional"`` (default)
    For every observed household-week the prediction is the model's expected
    spending given the household's observed claim history: billed OOP to date,
    the OOP and count of still-unbilled claims, and the contract.  Signal noise
    is integrated out with Gauss-Hermite quadrature and the health shock with
    ``shock_draws`` simulated draws per household, which is where replicates
    differ.  Every grid point reuses the same draws.

``"simulated"``
    Each replicate simulates a whole panel at the candidate parameters
    (common random numbers across grid points) and is compared week by week
    with the observed panel.  Simulated spending carries its own shock noise,
    whose variance moves with the parameters, so this mode does not generally
    pin down the truth; it is kept for comparison.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import ndtr

from billsim import rng as rngmod
from billsim.beliefs import LearningParams
from billsim.shocks import shock_from_normal
from billsim.simulator import (
    BillDelayDistribution,
    ModelParams,
    Population,
    make_draws,
    simulate_year,
)


class AlignmentError(ValueError):
    pass


class BoundaryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GridAxis:
    lo: float
    hi: float
    step: float

    def __post_init__(self):
        if self.hi < self.lo or not self.step > 0:
            raise ValueError(f"invalid grid axis {self}")

    def values(self) -> np.ndarray:
        n = int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return np.round(self.lo + self.step * np.arange(n), 10)


@dataclass
class EstimationConfig:
    beta_grid: GridAxis = GridAxis(0.5, 3.0, 0.05)
    sigma_grid: GridAxis = GridAxis(0.0, 60.0, 5.0)
    refine: bool = True
    refine_beta_step: float = 0.01
    refine_beta_halfwidth: float = 0.05
    refine_sigma_step: float = 1.0
    refine_sigma_halfwidth: float = 5.0
    n_replicates: int = 50
    seed: int = rngmod.DEFAULT_SEED
    bootstrap_draws: int = 200
    shock_draws: int = 64
    quad_nodes: int = 16
    price_nodes: int = 33
    objective_mode: str = "conditional"
    shock_cap_mode: str = "off"

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        if self.objective_mode not in ("conditional", "simulated"):
            raise ValueError(f"objective_mode must be conditional or simulated, got {self.objective_mode!r}")
        if self.shock_cap_mode not in ("off", "clip_to_observed"):
            raise ValueError(f"shock_cap_mode must be off or clip_to_observed, got {self.shock_cap_mode!r}")
        if self.shock_draws < 1 or self.quad_nodes < 1 or self.price_nodes < 2:
            raise ValueError("shock_draws, quad_nodes >= 1 and price_nodes >= 2 are required")


@dataclass
class EstimationResult:
    best_params: dict
    objective_profile: pd.DataFrame
    ci_95: dict = field(default_factory=dict)
    replicate_count: int = 0
    on_boundary: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "best_params": self.best_params,
            "ci_95": {k: list(v) for k, v in self.ci_95.items()},
            "replicate_count": self.replicate_count,
            "on_boundary": self.on_boundary,
            "diagnostics": self.diagnostics,
            "grid_points": int(len(self.objective_profile)),
        }


# ---------------------------------------------------------------------------
# RMSE
# ---------------------------------------------------------------------------


KEYS = ["household_id", "year", "week"]


def household_spend(panel: pd.DataFrame) -> np.ndarray:
    if "household_spend" in panel.columns:
        return panel["household_spend"].to_numpy(float)
    return panel["spend_per_person"].to_numpy(float) * panel["n_members"].to_numpy(float)


def rmse(observed: pd.DataFrame, predicted: pd.DataFrame) -> float:
    """Root mean squared difference in weekly household spending over aligned rows."""
    if len(observed) != len(predicted):
        raise AlignmentError(f"panels have {len(observed)} and {len(predicted)} rows")
    o = observed.sort_values(KEYS, kind="stable")
    p = predicted.sort_values(KEYS, kind="stable")
    if not np.array_equal(o[KEYS].to_numpy(), p[KEYS].to_numpy()):
        raise AlignmentError("panels are not aligned on (household_id, year, week)")
    d = household_spend(o) - household_spend(p)
    return float(np.sqrt(np.mean(d**2)))


# ---------------------------------------------------------------------------
# observed claim histories
# ---------------------------------------------------------------------------


@dataclass
class History:
    """Rectangular (unit x week) arrays derived from an observed panel; a unit is a household-year."""

    spend: np.ndarray
    known: np.ndarray
    pending_oop: np.ndarray
    pending_n: np.ndarray
    opened_n: np.ndarray  # bills first informing each week's decision
    hh_index: np.ndarray  # unit -> population row
    unit_keys: pd.DataFrame

    @property
    def shape(self):
        return self.spend.shape


def build_history(observed: pd.DataFrame, pop: Population) -> History:
    df = observed.sort_values(KEYS, kind="stable").reset_index(drop=True)
    T = pop.weeks
    units = df[["household_id", "year"]].drop_duplicates().reset_index(drop=True)
    if len(df) != len(units) * T:
        raise AlignmentError(f"observed panel is not rectangular in {T} weeks per household-year")
    wk = df["week"].to_numpy().reshape(len(units), T)
    if not np.all(wk == np.arange(1, T + 1)):
        raise AlignmentError("weeks must run 1..T for every household-year")
    pos = pd.Series(np.arange(pop.size), index=pop.household_ids)
    missing = set(units["household_id"]) - set(pos.index)
    if missing:
        raise AlignmentError(f"{len(missing)} observed households are absent from the population")
    hh = pos.loc[units["household_id"]].to_numpy()

    U = len(units)
    spend = household_spend(df).reshape(U, T)
    oop = df["true_oop_week"].to_numpy(float).reshape(U, T)
    bill = df["claim_bill_week"].astype("Float64").fillna(np.nan).to_numpy(float).reshape(U, T)
    claim = ~np.isnan(bill)
    week = np.arange(1, T + 1)[None, :]
    first_use = np.where(claim, np.maximum(np.nan_to_num(bill), week + 1), 0).astype(int)
    horizon = int(first_use.max(initial=T + 1)) + 2
    rows = np.repeat(np.arange(U), T)[claim.ravel()]
    fu = first_use[claim]
    arr_oop = np.zeros((U, horizon))
    arr_n = np.zeros((U, horizon))
    np.add.at(arr_oop, (rows, fu), oop[claim])
    np.add.at(arr_n, (rows, fu), 1.0)
    filed_oop = np.where(claim, oop, 0.0)
    # known at week t: bills with first_use <= t;  pending: filed before t, first_use > t
    known = np.cumsum(arr_oop, axis=1)[:, 1 : T + 1]
    opened_cum_n = np.cumsum(arr_n, axis=1)[:, 1 : T + 1]
    filed_before = np.cumsum(filed_oop, axis=1) - filed_oop
    filed_n_before = np.cumsum(claim, axis=1) - claim
    pending_oop = np.maximum(filed_before - known, 0.0)
    pending_n = np.maximum(filed_n_before - opened_cum_n, 0.0)
    return History(spend, known, pending_oop, pending_n, arr_n[:, 1 : T + 1], hh, units)


# ---------------------------------------------------------------------------
# conditional predictor
# ---------------------------------------------------------------------------


class ConditionalPredictor:
    """Expected weekly spending given the observed claim history.

    ``G[h, i, r]`` holds ``E max(0, lambda_h + A_h * u_i)`` for a price-gap grid
    ``u_i`` in [0, 1] (``u = 1 - Pr(theta <= d)``, ``A_h = omega_h (1 - c_h)``),
    averaged over ``shock_draws`` household shocks of replicate ``r``.
    """

    def __init__(self, hist: History, pop: Population, cfg: EstimationConfig):
        self.hist, self.pop, self.cfg = hist, pop, cfg
        U, T = hist.shape
        R, K, A = cfg.n_replicates, cfg.shock_draws, cfg.price_nodes
        h = hist.hh_index
        self.d = pop.deductible[h][:, None]
        self.u_grid = np.linspace(0.0, 1.0, A)
        amp = (pop.omega * (1.0 - pop.coinsurance))[h]
        x, w = np.polynomial.hermite_e.hermegauss(cfg.quad_nodes)
        self.qx, self.qw = x, w / w.sum()

        sub = pop.subset(h)
        G = np.empty((U, A, R))
        cap_corr = np.zeros((U, T, R)) if cfg.shock_cap_mode == "clip_to_observed" else None
        for r in range(R):
            g = rngmod.stream(cfg.seed, r, "estimation-shocks")
            z = g.standard_normal((U, sub.max_members, K))
            lam = shock_from_normal(z, sub.member_mu[..., None], sub.member_sigma[..., None], sub.member_kappa[..., None])
            lam = np.where(sub.member_mask[..., None], lam, 0.0).sum(axis=1)  # (U, K)
            lam.sort(axis=1)
            for i, u in enumerate(self.u_grid):
                G[:, i, r] = np.maximum(lam + (amp * u)[:, None], 0.0).mean(axis=1)
            if cap_corr is not None:
                # E (lambda - m_obs)^+ removes shocks above what was actually spent
                for t in range(T):
                    cap_corr[:, t, r] = np.maximum(lam - hist.spend[:, t : t + 1], 0.0).mean(axis=1)
        self.G = G
        self.cap_corr = cap_corr
        self.zero_ded = (self.d <= 0)

    def _weights(self, theta_base: np.ndarray) -> np.ndarray:
        """Interpolation weights on the price-gap grid, shape (U, T, A)."""
        hist, A = self.hist, self.cfg.price_nodes
        U, T = hist.shape
        sd = self._sd
        noisy = sd > 0
        W = np.zeros((U * T, A))
        flat = np.arange(U * T).reshape(U, T)

        def scatter(cells, u, w):
            s = u * (A - 1)
            i0 = np.minimum(np.floor(s).astype(int), A - 2)
            f = s - i0
            idx = cells * A + i0
            W.ravel()[:] += np.bincount(idx, weights=w * (1 - f), minlength=U * T * A) + np.bincount(
                idx + 1, weights=w * f, minlength=U * T * A)

        # deterministic cells
        det = ~noisy
        theta = np.maximum(theta_base, 0.0)
        u_det = np.where(self.zero_ded, 1.0, (theta > self.d).astype(float))
        scatter(flat[det], u_det[det], np.ones(det.sum()))
        if noisy.any():
            tb, s_, dd = theta_base[noisy], sd[noisy], np.broadcast_to(self.d, (U, T))[noisy]
            zd = np.broadcast_to(self.zero_ded, (U, T))[noisy]
            th = np.maximum(tb[:, None] + s_[:, None] * self.qx[None, :], 0.0)
            p = ndtr((dd[:, None] - th) / s_[:, None])
            u = np.where(zd[:, None], 1.0, 1.0 - p)
            cells = np.repeat(flat[noisy], len(self.qx))
            scatter(cells, u.ravel(), np.tile(self.qw, noisy.sum()))
        return W.reshape(U, T, A)

    def predict(self, beta: float, sigma_s: float, belief: np.ndarray | None = None) -> np.ndarray:
        """Predicted spending, shape (U, T, R)."""
        hist = self.hist
        bias = beta if belief is None else belief
        theta_base = hist.known + bias * hist.pending_oop
        self._sd = sigma_s * np.sqrt(hist.pending_n)
        W = self._weights(theta_base)
        pred = np.matmul(W, self.G)
        if self.cap_corr is not None:
            pred = np.maximum(pred - self.cap_corr, 0.0)
        return pred

    def sse(self, beta: float, sigma_s: float) -> np.ndarray:
        """Per-unit squared error summed over weeks, shape (U, R)."""
        pred = self.predict(beta, sigma_s)
        return ((pred - self.hist.spend[:, :, None]) ** 2).sum(axis=1)


def _median_rmse(sse: np.ndarray, n_cells: float) -> tuple:
    r = np.sqrt(sse.sum(axis=0) / n_cells)
    return float(np.median(r)), float(r.std(ddof=1)) if r.size > 1 else 0.0


# ---------------------------------------------------------------------------
# simulated-panel objective
# ---------------------------------------------------------------------------


def _simulated_sse(hist: History, pop: Population, params: ModelParams, cfg: EstimationConfig,
                   delays: BillDelayDistribution) -> np.ndarray:
    years = hist.unit_keys["year"].to_numpy()
    year_idx = pd.factorize(years, sort=True)[0]
    U = hist.shape[0]
    out = np.zeros((U, cfg.n_replicates))
    for r in range(cfg.n_replicates):
        for yi in np.unique(year_idx):
            sel = year_idx == yi
            sub = pop.subset(hist.hh_index[sel])
            res = simulate_year(sub, params, make_draws(sub, cfg.seed, r, int(yi)), delays)
            out[sel, r] = ((res.spend - hist.spend[sel]) ** 2).sum(axis=1)
    return out


def objective(params, observed: pd.DataFrame, cfg: EstimationConfig, pop: Population,
              delays: BillDelayDistribution | None = None) -> float:
    """Median RMSE over replicates at one parameter point.

    ``params`` is a :class:`ModelParams` or a ``(beta, sigma_s)`` pair.
    """
    if not isinstance(params, ModelParams):
        params = ModelParams(*params)
    hist = build_history(observed, pop)
    if cfg.objective_mode == "simulated":
        sse = _simulated_sse(hist, pop, params, cfg, delays or BillDelayDistribution.geometric())
    elif params.learning is not None:
        sse = LearningObjective(hist, pop, cfg).sse(params)
    else:
        sse = ConditionalPredictor(hist, pop, cfg).sse(params.beta, params.sigma_s)
    return _median_rmse(sse, hist.spend.size)[0]


# ---------------------------------------------------------------------------
# grid search and bootstrap
# ---------------------------------------------------------------------------


def _argmin(profile: pd.DataFrame, cols) -> int:
    """Row of the smallest objective; exact ties go to the smallest parameters in column order."""
    order = profile.sort_values(["median_rmse", *cols], kind="stable")
    return int(order.index[0])


def _boundary(best: dict, axes: dict) -> dict:
    out = {}
    for k, vals in axes.items():
        vals = np.asarray(vals)
        if len(vals) > 1 and (np.isclose(best[k], vals.min()) or np.isclose(best[k], vals.max())):
            out[k] = True
    return out


def _evaluate(points, sse_fn, n_cells, keep_sse=False):
    rows, store = [], []
    for pt in points:
        sse = sse_fn(*pt)
        med, sd = _median_rmse(sse, n_cells)
        rows.append((*pt, med, sd))
        if keep_sse:
            store.append(sse)
    return rows, store


def grid_search(observed: pd.DataFrame, cfg: EstimationConfig, pop: Population,
                delays: BillDelayDistribution | None = None, keep_sse: bool = False) -> EstimationResult:
    """Exhaustive (beta, sigma_s) grid, optionally followed by a finer grid around the coarse argmin."""
    hist = build_history(observed, pop)
    n_cells = float(hist.spend.size)
    if cfg.objective_mode == "simulated":
        dl = delays or BillDelayDistribution.geometric()
        sse_fn = lambda b, s: _simulated_sse(hist, pop, ModelParams(b, s), cfg, dl)  # noqa: E731
    else:
        sse_fn = ConditionalPredictor(hist, pop, cfg).sse

    bvals, svals = cfg.beta_grid.values(), cfg.sigma_grid.values()
    if np.any(bvals <= 0):
        raise ValueError("beta grid must be positive")
    coarse, _ = _evaluate(itertools.product(bvals, svals), sse_fn, n_cells)
    prof = pd.DataFrame(coarse, columns=["beta", "sigma_s", "median_rmse", "sd_rmse"])
    prof["stage"] = "coarse"
    best = prof.loc[_argmin(prof, ["beta", "sigma_s"])]
    boundary = _boundary({"beta": best.beta, "sigma_s": best.sigma_s}, {"beta": bvals, "sigma_s": svals})

    fine_pts, fine_sse = [], []
    if cfg.refine and (len(bvals) > 1 or len(svals) > 1):
        fb = _refine_axis(best.beta, cfg.refine_beta_halfwidth, cfg.refine_beta_step, bvals, 1e-6)
        fs = _refine_axis(best.sigma_s, cfg.refine_sigma_halfwidth, cfg.refine_sigma_step, svals, 0.0)
        fine_pts = list(itertools.product(fb, fs))
        fine, fine_sse = _evaluate(fine_pts, sse_fn, n_cells, keep_sse)
        fp = pd.DataFrame(fine, columns=["beta", "sigma_s", "median_rmse", "sd_rmse"])
        fp["stage"] = "refine"
        prof = pd.concat([prof, fp], ignore_index=True)
        sub = prof[prof.stage == "refine"]
        best = prof.loc[_argmin(sub, ["beta", "sigma_s"])]
    elif keep_sse:
        fine_pts = list(itertools.product(bvals, svals))
        _, fine_sse = _evaluate(fine_pts, sse_fn, n_cells, True)

    for k in boundary:
        warnings.warn(f"grid argmin for {k} lies on the grid boundary; widen the grid", BoundaryWarning, stacklevel=2)
    res = EstimationResult(
        best_params={"beta": float(best.beta), "sigma_s": float(best.sigma_s)},
        objective_profile=prof,
        replicate_count=cfg.n_replicates,
        on_boundary=boundary,
        diagnostics={"units": int(hist.shape[0]), "weeks": int(hist.shape[1]), "mode": cfg.objective_mode},
    )
    if keep_sse:
        res.diagnostics["_points"] = fine_pts
        res.diagnostics["_sse"] = np.stack(fine_sse) if fine_sse else None
    return res


def _refine_axis(center, half, step, coarse_vals, floor):
    lo = max(center - half, coarse_vals.min(), floor)
    hi = min(center + half, coarse_vals.max())
    n = int(round((hi - lo) / step)) + 1
    vals = np.round(lo + step * np.arange(n), 10)
    return vals[vals <= hi + 1e-9]


def bootstrap_ci(observed: pd.DataFrame, cfg: EstimationConfig, pop: Population,
                 result: EstimationResult | None = None, level: float = 0.95) -> dict:
    """Household-resampling percentile intervals for every estimated parameter.

    Each bootstrap draw re-minimises the median-RMSE objective over the
    refined grid, reusing per-household squared errors so a draw costs one
    weighted sum rather than a new simulation.
    """
    if cfg.bootstrap_draws < 2:
        raise ValueError("bootstrap needs at least 2 draws")
    if result is None or result.diagnostics.get("_sse") is None:
        result = grid_search(observed, cfg, pop, keep_sse=True)
    pts = np.asarray(result.diagnostics["_points"], float)
    sse = result.diagnostics["_sse"]  # (P, U, R)
    U = sse.shape[1]
    n_cells = float(U * pop.weeks)
    g = rngmod.stream(cfg.seed, 0, "bootstrap")
    est = np.empty((cfg.bootstrap_draws, pts.shape[1]))
    order = np.lexsort(pts.T[::-1])  # smallest parameters first on exact ties
    for b in range(cfg.bootstrap_draws):
        counts = np.bincount(g.integers(0, U, U), minlength=U).astype(float)
        tot = np.einsum("u,pur->pr", counts, sse)
        med = np.median(np.sqrt(tot / n_cells), axis=1)
        est[b] = pts[order[np.argmin(med[order])]]
    a = (1 - level) / 2
    names = ["beta", "sigma_s"] if pts.shape[1] == 2 else list(result.best_params)
    ci = {n: (float(np.quantile(est[:, j], a)), float(np.quantile(est[:, j], 1 - a))) for j, n in enumerate(names)}
    result.ci_95 = ci
    result.diagnostics["bootstrap_estimates"] = est.tolist()
    return ci


# ---------------------------------------------------------------------------
# learning model
# ---------------------------------------------------------------------------


class LearningObjective:
    """Median RMSE for the learning model.

    Household beliefs are unobserved, so each replicate draws a prior mean per
    household and a learning signal per opened bill, runs the conjugate
    updates along the observed bill arrivals, and predicts spending given the
    resulting belief path.
    """

    def __init__(self, hist: History, pop: Population, cfg: EstimationConfig):
        self.hist = hist
        self.base = ConditionalPredictor(hist, pop, EstimationConfig(**{**cfg.__dict__, "n_replicates": 1}))
        self.cfg = cfg
        U, T = hist.shape
        self.prior_z = np.stack([rngmod.stream(cfg.seed, r, "estimation-prior").standard_normal(U)
                                 for r in range(cfg.n_replicates)])
        # sum of standard-normal learning noise over the bills opened each week
        self.learn_z = np.stack([
            rngmod.stream(cfg.seed, r, "estimation-learn").standard_normal((U, T)) * np.sqrt(hist.opened_n)
            for r in range(cfg.n_replicates)
        ])
        self.G_all = ConditionalPredictor(hist, pop, cfg).G

    def belief_paths(self, lp: LearningParams, r: int) -> np.ndarray:
        from billsim.beliefs import update_belief_batch

        U, T = self.hist.shape
        mean = lp.prior_mean + math.sqrt(lp.prior_var) * self.prior_z[r]
        var = np.full(U, lp.prior_var)
        out = np.empty((U, T))
        sl = math.sqrt(lp.signal_var)
        for t in range(T):
            n = self.hist.opened_n[:, t]
            mean, var = update_belief_batch(mean, var, n, n + sl * self.learn_z[r, :, t], lp.signal_var)
            out[:, t] = mean
        return out

    def sse(self, params: ModelParams) -> np.ndarray:
        lp = params.learning
        U, T = self.hist.shape
        out = np.empty((U, self.cfg.n_replicates))
        for r in range(self.cfg.n_replicates):
            belief = self.belief_paths(lp, r)
            self.base.G = self.G_all[:, :, r : r + 1]
            pred = self.base.predict(params.beta, params.sigma_s, belief)[:, :, 0]
            out[:, r] = ((pred - self.hist.spend) ** 2).sum(axis=1)
        return out


@dataclass
class LearningGrid:
    prior_mean: tuple = (1.5, 2.0, 2.5, 3.0)
    prior_var: tuple = (0.0025, 0.0144, 0.04)
    sigma_s: tuple = (5.0, 15.0, 30.0)
    signal_var: tuple = (0.0025, 0.0081, 0.04)


def learning_grid_search(observed: pd.DataFrame, cfg: EstimationConfig, pop: Population,
                         grid: LearningGrid = LearningGrid(), refine: bool = True) -> EstimationResult:
    """Coarse 4-parameter grid over (prior mean, prior variance, sigma_s, learning-signal variance).

    With ``refine`` a second pass searches midpoints around the coarse argmin.
    """
    hist = build_history(observed, pop)
    obj = LearningObjective(hist, pop, cfg)
    n_cells = float(hist.spend.size)
    cols = ["prior_mean", "prior_var", "sigma_s", "signal_var"]

    def run(points, stage):
        rows = []
        for pm, pv, ss, sv in points:
            p = ModelParams(sigma_s=ss, learning=LearningParams(pm, pv, sv))
            med, sd = _median_rmse(obj.sse(p), n_cells)
            rows.append((pm, pv, ss, sv, med, sd, stage))
        return pd.DataFrame(rows, columns=[*cols, "median_rmse", "sd_rmse", "stage"])

    axes = {c: np.asarray(getattr(grid, c), float) for c in cols}
    prof = run(itertools.product(*axes.values()), "coarse")
    best = prof.loc[_argmin(prof, cols)]
    boundary = _boundary({c: best[c] for c in cols}, axes)
    if refine:
        nbr = []
        for c in cols:
            v = axes[c]
            i = int(np.argmin(np.abs(v - best[c])))
            cand = {best[c]}
            if i > 0:
                cand.add(0.5 * (v[i - 1] + v[i]))
            if i < len(v) - 1:
                cand.add(0.5 * (v[i] + v[i + 1]))
            nbr.append(sorted(cand))
        fine = run(itertools.product(*nbr), "refine")
        prof = pd.concat([prof, fine], ignore_index=True)
        best = prof.loc[_argmin(prof, cols)]
    return EstimationResult(
        best_params={c: float(best[c]) for c in cols},
        objective_profile=prof,
        replicate_count=cfg.n_replicates,
        on_boundary=boundary,
        diagnostics={"units": int(hist.shape[0]), "mode": "learning"},
    )


def write_profile(result: EstimationResult, path) -> None:
    result.objective_profile.to_csv(path, index=False, lineterminator="\n")

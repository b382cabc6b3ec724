"""Poisson fixed-effects regression and the bill-timing designs built on it.

The Poisson fit is IRLS.  The fixed-effect group with the most levels is
absorbed exactly through its diagonal block (weighted within-group
demeaning of the other columns); the remaining groups enter as dense dummy
columns with their first level dropped.  This keeps the linear algebra at
``p x p`` where ``p`` is the number of regressors plus small FE dummies, which
is comfortable up to a few thousand absorbed levels.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from billsim import rng as rngmod
from billsim.simulator import BillDelayDistribution


class RegressionError(RuntimeError):
    pass


class ConvergenceError(RegressionError):
    def __init__(self, msg, trace):
        super().__init__(f"{msg}; deviance trace: {[round(d, 6) for d in trace]}")
        self.trace = list(trace)


class RankDeficientError(RegressionError):
    pass


class SeparationWarning(UserWarning):
    pass


@dataclass
class RegressionSpec:
    outcome: str = "spend_per_person"
    regressors: tuple = ("post_service", "post_bill")
    fixed_effects: tuple = ("household_id", "year", "week")
    cluster: str | None = "household_id"
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if len(self.regressors) == 0:
            raise ValueError("at least one non-FE regressor is required")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")


@dataclass
class FitResult:
    names: list
    coef: np.ndarray
    se: np.ndarray
    vcov: np.ndarray
    deviance: float
    iterations: int
    converged: bool
    deviance_trace: list
    n_obs: int
    n_clusters: int
    dropped_levels: dict = field(default_factory=dict)
    fitted: pd.Series | None = field(default=None, repr=False)

    @property
    def z(self) -> np.ndarray:
        return self.coef / self.se

    def __getitem__(self, name):
        return float(self.coef[self.names.index(name)])

    def se_of(self, name) -> float:
        return float(self.se[self.names.index(name)])

    def table(self) -> list:
        return [
            {"name": n, "coef": float(b), "se": float(s), "z": float(b / s) if s > 0 else float("nan"),
             "pct_effect": float(np.expm1(b))}
            for n, b, s in zip(self.names, self.coef, self.se)
        ]

    def to_dict(self) -> dict:
        return {
            "coefficients": self.table(),
            "deviance": self.deviance,
            "iterations": self.iterations,
            "converged": self.converged,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "dropped_levels": {k: len(v) for k, v in self.dropped_levels.items()},
        }


def _codes(col) -> tuple:
    codes, uniq = pd.factorize(pd.Series(col), sort=True)
    return codes.astype(np.int64), len(uniq)


def _drop_separated(df: pd.DataFrame, y_col: str, fe_cols) -> tuple:
    """Remove FE levels whose outcomes are all zero, repeating until stable."""
    dropped = {c: [] for c in fe_cols}
    while True:
        keep = np.ones(len(df), dtype=bool)
        for c in fe_cols:
            tot = df.groupby(c, sort=False)[y_col].transform("sum").to_numpy()
            bad = tot <= 0
            if bad.any():
                dropped[c].extend(pd.unique(df.loc[bad, c]).tolist())
                keep &= ~bad
        if keep.all():
            break
        df = df.loc[keep]
    dropped = {k: v for k, v in dropped.items() if v}
    if dropped:
        counts = ", ".join(f"{k}: {len(v)}" for k, v in dropped.items())
        warnings.warn(f"dropped all-zero fixed-effect levels ({counts})", SeparationWarning, stacklevel=3)
    return df, dropped


class _Groups:
    """Contiguous group layout for fast weighted within-group means (rows sorted by group)."""

    def __init__(self, codes):
        counts = np.bincount(codes)
        self.counts = counts[counts > 0]
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])

    def demean(self, X, w):
        sw = np.add.reduceat(w, self.starts)
        if X.ndim == 1:
            m = np.add.reduceat(w * X, self.starts) / sw
            return X - np.repeat(m, self.counts)
        m = np.add.reduceat(X * w[:, None], self.starts, axis=0) / sw[:, None]
        return X - np.repeat(m, self.counts, axis=0)

    def means(self, x, w):
        return np.add.reduceat(w * x, self.starts) / np.add.reduceat(w, self.starts)

    def expand(self, m):
        return np.repeat(m, self.counts)


def _deviance(y, mu) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(t - (y - mu)))


def poisson_fit(panel: pd.DataFrame, spec: RegressionSpec = RegressionSpec(),
                start: pd.Series | None = None, inference: bool = True) -> FitResult:
    """Poisson pseudo-maximum likelihood with fixed effects and clustered sandwich errors.

    ``start`` optionally supplies positive starting means indexed like ``panel``
    (e.g. ``fitted`` of an earlier fit on the same rows); the optimum does not
    depend on it, only the iteration count does.  ``inference=False`` skips
    the sandwich (standard errors are then nan).
    """
    cols = [spec.outcome, *spec.regressors, *spec.fixed_effects]
    if spec.cluster:
        cols.append(spec.cluster)
    missing = [c for c in dict.fromkeys(cols) if c not in panel.columns]
    if missing:
        raise RegressionError(f"panel lacks columns {missing}")
    df = panel.loc[:, list(dict.fromkeys(cols))]
    if (df[spec.outcome] < 0).any():
        raise RegressionError("Poisson outcome must be non-negative")
    dropped = {}
    if spec.fixed_effects:
        df, dropped = _drop_separated(df, spec.outcome, spec.fixed_effects)
    if len(df) == 0:
        raise RegressionError("no observations left after dropping all-zero fixed-effect levels")

    y = df[spec.outcome].to_numpy(float)
    names = list(spec.regressors)
    blocks = [df[list(spec.regressors)].to_numpy(float)]

    # absorb the largest FE group; dummies for the rest
    absorbed, G = None, 1
    fes = [(c, *_codes(df[c])) for c in spec.fixed_effects]
    if fes:
        big = max(range(len(fes)), key=lambda i: fes[i][2])
        _, absorbed, G = fes.pop(big)
    else:
        absorbed = np.zeros(len(y), dtype=np.int64)
    for c, codes, n in fes:
        if n > 1:
            D = np.zeros((len(y), n - 1))
            rows = np.flatnonzero(codes > 0)
            D[rows, codes[rows] - 1] = 1.0
            blocks.append(D)
            lv = pd.factorize(pd.Series(df[c]), sort=True)[1]
            names.extend(f"{c}[{v}]" for v in lv[1:])
    X = np.hstack(blocks)
    p = X.shape[1]
    order = np.argsort(absorbed, kind="stable")
    X, y, absorbed = X[order], y[order], absorbed[order]
    row_index = df.index[order]
    grp = _Groups(absorbed)
    cl_codes = _codes(df[spec.cluster])[0][order] if spec.cluster else None

    # rank check on the demeaned design
    Xt0 = grp.demean(X, np.ones(len(y)))
    scale = np.sqrt((Xt0**2).sum(axis=0))
    if np.any(scale < 1e-10 * np.sqrt(len(y))):
        bad = [names[j] for j in np.flatnonzero(scale < 1e-10 * np.sqrt(len(y)))]
        raise RankDeficientError(f"regressors have no variation within fixed effects: {bad}")
    Z = Xt0 / scale
    ev = np.linalg.eigvalsh(Z.T @ Z)
    if ev[0] < 1e-13 * ev[-1]:
        r = int(np.sum(ev > 1e-13 * ev[-1]))
        raise RankDeficientError(
            f"design is rank deficient (rank {r} < {p}); collinear among {names[: len(spec.regressors)]}"
        )

    mu = 0.5 * (y + y.mean())
    if start is not None:
        s0 = start.reindex(row_index).to_numpy(float)
        mu = np.where(np.isfinite(s0) & (s0 > 0), s0, mu)
    eta = np.log(mu)
    dev_old = _deviance(y, mu)
    trace = [dev_old]
    b = np.zeros(p)
    converged, it, polish = False, 0, 0
    while it < spec.max_iter:
        it += 1
        w = mu
        z = eta + (y - mu) / mu
        Xt = grp.demean(X, w)
        zt = grp.demean(z, w)
        XtW = Xt.T * w
        b_new = np.linalg.solve(XtW @ Xt, XtW @ zt)
        xb = X @ b_new
        eta = xb + grp.expand(grp.means(z - xb, w))
        mu = np.exp(eta)
        dev = _deviance(y, mu)
        trace.append(dev)
        step = np.max(np.abs(b_new - b)) if p else 0.0
        b = b_new
        if abs(dev - dev_old) / (abs(dev) + 0.1) < spec.tol:
            converged = True
            # a couple of extra Newton steps cost little and pin the coefficients down
            polish += 1
            if step < 1e-12 or polish > 3:
                break
        dev_old = dev
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {spec.max_iter} iterations", trace)

    fitted = pd.Series(mu, index=row_index).sort_index()
    if not inference:
        nan = np.full(p, np.nan)
        return FitResult(names, b, nan, np.full((p, p), np.nan), trace[-1], it, converged, trace, len(y),
                         0, dropped, fitted)

    # sandwich, clustered
    w = mu
    Xt = grp.demean(X, w)
    bread = np.linalg.inv((Xt.T * w) @ Xt)
    score = Xt * (y - mu)[:, None]
    if spec.cluster:
        cc = cl_codes
        nc = int(cc.max()) + 1
    else:
        cc, nc = np.arange(len(y)), len(y)
    S = np.zeros((nc, p))
    np.add.at(S, cc, score)
    meat = S.T @ S
    V = bread @ meat @ bread * (nc / (nc - 1) if nc > 1 else 1.0)
    se = np.sqrt(np.maximum(np.diag(V), 0.0))
    return FitResult(names, b, se, V, trace[-1], it, converged, trace, len(y), nc, dropped, fitted)


# ---------------------------------------------------------------------------
# designs
# ---------------------------------------------------------------------------


def _analysis_sample(panel: pd.DataFrame, drop_index_week: bool) -> pd.DataFrame:
    if drop_index_week and "shoppable_flag" in panel.columns:
        return panel.loc[panel["shoppable_flag"] == 0]
    return panel


def service_week(panel: pd.DataFrame) -> np.ndarray:
    """Per-row week of the household-year's index service (nan when none)."""
    svc = panel["week"].where(panel["shoppable_flag"] == 1)
    return svc.groupby([panel["household_id"], panel["year"]]).transform("min").to_numpy(float)


def add_event_time_controls(df: pd.DataFrame, mode: str, first: int = 2, service: np.ndarray | None = None) -> list:
    """Add weeks-since-service controls for post-service rows; return their names.

    ``"dummies"`` adds one indicator per week since service from ``first`` on
    (``post_service`` then measures the level right after the service);
    ``"linear"`` adds a linear trend on each side of the service week.
    ``service`` gives precomputed per-row service weeks for frames that no
    longer contain the index rows.
    """
    if mode == "none":
        return []
    e = df["week"].to_numpy(float) - (service_week(df) if service is None else service)
    post = df["post_service"].to_numpy() == 1
    if mode == "linear":
        df["trend_post"] = np.where(post, e, 0.0)
        df["trend_pre"] = np.where(~post & ~np.isnan(e), e, 0.0)
        return ["trend_post", "trend_pre"]
    if mode != "dummies":
        raise ValueError(f"unknown event-time control mode {mode!r}")
    names = []
    top = int(np.nanmax(np.where(post, e, np.nan))) if post.any() else 0
    for k in range(first, top + 1):
        col = post & (e == k)
        if col.any():
            nm = f"since_service_{k}"
            df[nm] = col.astype(float)
            names.append(nm)
    return names


def triple_diff(panel: pd.DataFrame, spec: RegressionSpec | None = None, drop_index_week: bool = True,
                event_time: str = "dummies", start: pd.Series | None = None, inference: bool = True):
    """Fit spend on post_service and post_bill with household, year and week effects.

    The index week itself is dropped by default: its spending is the index
    claim, not a response to it.  ``event_time`` optionally adds
    weeks-since-service controls (see :func:`add_event_time_controls`).

    Returns
    -------
    (beta_post_service, beta_post_bill, FitResult)
    """
    spec = spec or RegressionSpec()
    df = panel
    if event_time != "none":
        df = panel.copy()
        extra = add_event_time_controls(df, event_time)
        spec = replace(spec, regressors=(*spec.regressors, *extra))
    fit = poisson_fit(_analysis_sample(df, drop_index_week), spec, start, inference)
    return fit["post_service"], fit["post_bill"], fit


@dataclass
class EventStudyResult:
    k: np.ndarray
    gamma: np.ndarray
    se: np.ndarray
    fit: FitResult

    def rows(self) -> list:
        # effect is the proportional change in spending, exp(gamma) - 1
        return [{"k": int(k), "gamma": float(g), "se": float(s), "effect": float(np.expm1(g))}
                for k, g, s in zip(self.k, self.gamma, self.se)]


def event_study(panel: pd.DataFrame, window_T: int, spec: RegressionSpec | None = None, drop_index_week: bool = True,
                event_time: str = "dummies"):
    """Time-to-bill dummies for k in [-T, T] minus k = -1 on post-service weeks.

    Post-service weeks outside the window are dropped; the reference level is
    the week before the index bill.  Weeks without an index event and
    pre-service weeks identify the fixed effects.
    """
    if window_T < 1:
        raise ValueError("window_T must be >= 1")
    df = panel.copy()
    df["_bill"] = index_bill_week(df)
    df["_svc"] = service_week(df)
    df = _analysis_sample(df, drop_index_week)
    rel = df["week"].to_numpy() - df["_bill"].to_numpy()
    post = df["post_service"].to_numpy() == 1
    keep = ~post | ((rel >= -window_T) & (rel <= window_T))
    df, rel, post = df.loc[keep], rel[keep], post[keep]
    ks = [k for k in range(-window_T, window_T + 1) if k != -1]
    names = []
    for k in ks:
        nm = f"k{k:+d}"
        df[nm] = (post & (rel == k)).astype(float)
        names.append(nm)
    extra = add_event_time_controls(df, event_time, service=df["_svc"].to_numpy()) if event_time != "none" else []
    spec = spec or RegressionSpec()
    spec = replace(spec, regressors=("post_service", *names, *extra))
    fit = poisson_fit(df, spec)
    g = np.array([fit[n] for n in names])
    s = np.array([fit.se_of(n) for n in names])
    return EventStudyResult(np.array(ks), g, s, fit)


def index_bill_week(panel: pd.DataFrame) -> np.ndarray:
    """Per-row bill week of the household-year's index claim (nan when none)."""
    is_idx = panel["shoppable_flag"].to_numpy() == 1
    bw = pd.Series(np.where(is_idx, panel["claim_bill_week"].astype("Float64").fillna(np.nan).to_numpy(float), np.nan))
    key = [panel["household_id"].to_numpy(), panel["year"].to_numpy()]
    return bw.groupby(key).transform("max").to_numpy()


# ---------------------------------------------------------------------------
# placebo
# ---------------------------------------------------------------------------


def empirical_delay_pmf(panel: pd.DataFrame, index_only: bool = True) -> BillDelayDistribution:
    """Delay distribution of index claims (or of every claim) recorded in the panel."""
    has = panel["claim_bill_week"].notna()
    if index_only:
        has &= panel["shoppable_flag"] == 1
    tau = (panel.loc[has, "claim_bill_week"].astype(int) - panel.loc[has, "week"]).to_numpy()
    if tau.size == 0:
        raise RegressionError("panel contains no claims with bill weeks")
    p = np.bincount(tau).astype(float)
    return BillDelayDistribution(tuple(p / p.sum()))


@dataclass
class PlaceboResult:
    draws: np.ndarray
    actual: float
    mean: float
    sd: float
    p5: float
    share_below_actual: float

    def to_dict(self) -> dict:
        return {
            "actual_beta_post_bill": self.actual,
            "placebo_mean": self.mean,
            "placebo_sd": self.sd,
            "placebo_p05": self.p5,
            "share_placebo_below_actual": self.share_below_actual,
            "n_draws": int(self.draws.size),
            "draws": self.draws.tolist(),
        }


def reassign_bills(panel: pd.DataFrame, tau_by_event: np.ndarray) -> pd.DataFrame:
    """Set post_bill from service week plus the given delay for each index event."""
    df = panel.copy()
    svc = df["week"].where(df["shoppable_flag"] == 1)
    key = [df["household_id"], df["year"]]
    service = svc.groupby(key).transform("min").to_numpy()
    ev = df.loc[df["shoppable_flag"] == 1, ["household_id", "year"]].reset_index(drop=True)
    if len(tau_by_event) != len(ev):
        raise ValueError("one delay per index event is required")
    ev["tau"] = tau_by_event
    t = df[["household_id", "year"]].merge(ev, how="left", on=["household_id", "year"])["tau"].to_numpy()
    new_bill = service + t
    wk = df["week"].to_numpy()
    df["post_bill"] = (~np.isnan(service) & (wk >= np.nan_to_num(new_bill, nan=np.inf))).astype(int)
    return df


def placebo(panel: pd.DataFrame, n_draws: int, seed: int, delays: BillDelayDistribution | None = None,
            spec: RegressionSpec | None = None, drop_index_week: bool = True,
            event_time: str = "dummies") -> PlaceboResult:
    """Refit the triple difference with index bill weeks redrawn from the delay pmf.

    Each draw starts IRLS from the fitted means of the actual fit, which only
    saves iterations.
    """
    if n_draws < 1:
        raise ValueError("placebo needs at least one draw")
    delays = delays or empirical_delay_pmf(panel)
    _, actual, fit0 = triple_diff(panel, spec, drop_index_week, event_time)
    n_ev = int((panel["shoppable_flag"] == 1).sum())
    out = np.empty(n_draws)
    for r in range(n_draws):
        g = rngmod.stream(seed, r, "placebo")
        tau = delays.quantile(g.random(n_ev))
        _, b2, _ = triple_diff(reassign_bills(panel, tau), spec, drop_index_week, event_time, start=fit0.fitted,
                               inference=False)
        out[r] = b2
    sd = float(out.std(ddof=1)) if n_draws > 1 else 0.0
    return PlaceboResult(out, actual, float(out.mean()), sd, float(np.percentile(out, 5)),
                         float(np.mean(out < actual)))

import warnings

import numpy as np
import pandas as pd
import pytest

from billsim.econometrics import (
    ConvergenceError,
    RankDeficientError,
    RegressionError,
    RegressionSpec,
    SeparationWarning,
    empirical_delay_pmf,
    event_study,
    placebo,
    poisson_fit,
    reassign_bills,
    triple_diff,
)
from billsim.simulator import BillDelayDistribution, ModelParams, PopulationConfig, generate_population, simulate_panel


def newton_oracle(X, y, iters=100):
    """Plain Newton-Raphson on the Poisson log-likelihood with an explicit dense design."""
    b = np.zeros(X.shape[1])
    b[0] = np.log(y.mean())
    for _ in range(iters):
        mu = np.exp(X @ b)
        step = np.linalg.solve((X.T * mu) @ X, X.T @ (y - mu))
        b += step
        if np.max(np.abs(step)) < 1e-15:
            break
    return b


def toy(n=50, seed=0, groups=None):
    g = np.random.default_rng(seed)
    X = g.normal(size=(n, 3))
    eta = 0.3 + X @ np.array([0.5, -0.4, 0.2])
    df = pd.DataFrame(X, columns=["x1", "x2", "x3"])
    if groups:
        df["grp"] = g.integers(0, groups, n)
        eta = eta + np.linspace(-0.5, 0.5, groups)[df["grp"]]
    df["y"] = g.poisson(np.exp(eta)).astype(float)
    df["id"] = np.arange(n)
    return df


SPEC3 = RegressionSpec(outcome="y", regressors=("x1", "x2", "x3"), fixed_effects=(), cluster=None)


@pytest.mark.parametrize("seed", range(10))
def test_newton_oracle_no_fe(seed):
    df = toy(seed=seed)
    fit = poisson_fit(df, SPEC3)
    X = np.column_stack([np.ones(len(df)), df[["x1", "x2", "x3"]]])
    ref = newton_oracle(X, df["y"].to_numpy())
    np.testing.assert_allclose(fit.coef, ref[1:], rtol=0, atol=1e-8)
    assert fit.converged


@pytest.mark.parametrize("seed", range(5))
def test_newton_oracle_with_fe(seed):
    df = toy(seed=seed + 100, groups=4)
    spec = RegressionSpec(outcome="y", regressors=("x1", "x2", "x3"), fixed_effects=("grp",), cluster=None)
    fit = poisson_fit(df, spec)
    D = pd.get_dummies(df["grp"]).to_numpy(float)
    X = np.column_stack([D, df[["x1", "x2", "x3"]]])
    ref = newton_oracle(X, df["y"].to_numpy())
    np.testing.assert_allclose(fit.coef, ref[-3:], rtol=0, atol=1e-8)


def test_intercept_only_and_binary_closed_form():
    df = pd.DataFrame({"y": [3.0] * 20, "x": [0, 1] * 10})
    fit = poisson_fit(df, RegressionSpec("y", ("x",), (), None))
    assert np.allclose(fit.fitted, 3.0)
    assert abs(fit["x"]) < 1e-12
    g = np.random.default_rng(1)
    x = g.integers(0, 2, 400)
    y = g.poisson(np.where(x == 1, 7.0, 4.0)).astype(float)
    fit = poisson_fit(pd.DataFrame({"y": y, "x": x}), RegressionSpec("y", ("x",), (), None))
    assert fit["x"] == pytest.approx(np.log(y[x == 1].mean() / y[x == 0].mean()), abs=1e-10)


def test_grouped_data_matches_log_mean_ratio_within_groups():
    # household effects plus one binary regressor that switches on for the whole second half
    g = np.random.default_rng(2)
    rows = []
    for h in range(30):
        base = g.uniform(1, 5)
        for t in range(10):
            x = int(t >= 5)
            rows.append((h, t, x, g.poisson(base * (1.5 if x else 1.0))))
    df = pd.DataFrame(rows, columns=["h", "t", "x", "y"]).astype(float)
    df = df[df.groupby("h")["y"].transform("sum") > 0]
    fit = poisson_fit(df, RegressionSpec("y", ("x",), ("h",), None))
    # with a common within-household split the MLE is the pooled log ratio
    s1 = df.loc[df.x == 1, "y"].sum()
    s0 = df.loc[df.x == 0, "y"].sum()
    assert fit["x"] == pytest.approx(np.log(s1 / s0), abs=1e-10)


def test_scale_invariance():
    df = toy(seed=3, groups=3)
    spec = RegressionSpec("y", ("x1", "x2"), ("grp",), None)
    a = poisson_fit(df, spec)
    df2 = df.assign(y=df["y"] * 37.5)
    b = poisson_fit(df2, spec)
    np.testing.assert_allclose(a.coef, b.coef, atol=1e-10)
    np.testing.assert_allclose(b.fitted, a.fitted * 37.5, rtol=1e-9)


def test_singleton_clusters_are_robust_se():
    df = toy(seed=4)
    a = poisson_fit(df, SPEC3)
    b = poisson_fit(df, RegressionSpec("y", ("x1", "x2", "x3"), (), "id"))
    np.testing.assert_allclose(a.se, b.se, rtol=1e-12)
    X = np.column_stack([np.ones(len(df)), df[["x1", "x2", "x3"]]])
    y = df["y"].to_numpy()
    mu = np.exp(X @ newton_oracle(X, y))
    bread = np.linalg.inv((X.T * mu) @ X)
    meat = (X * (y - mu)[:, None]).T @ (X * (y - mu)[:, None])
    n = len(y)
    V = bread @ meat @ bread * n / (n - 1)
    np.testing.assert_allclose(a.se, np.sqrt(np.diag(V))[1:], rtol=1e-7)


def test_errors():
    df = toy(seed=5)
    with pytest.raises(ConvergenceError) as e:
        poisson_fit(df, RegressionSpec("y", ("x1",), (), None, max_iter=1))
    assert len(e.value.trace) >= 2
    with pytest.raises(RegressionError):
        poisson_fit(df.assign(y=-df["y"] - 1), SPEC3)
    with pytest.raises(RegressionError):
        poisson_fit(df, RegressionSpec("y", ("nope",), (), None))
    with pytest.raises(RankDeficientError):
        poisson_fit(df.assign(x4=df["x1"] * 2), RegressionSpec("y", ("x1", "x4"), (), None))


def test_separation_drops_all_zero_levels():
    df = toy(seed=6, groups=5)
    df.loc[df.grp == 2, "y"] = 0.0
    with pytest.warns(SeparationWarning):
        fit = poisson_fit(df, RegressionSpec("y", ("x1",), ("grp",), None))
    assert fit.dropped_levels == {"grp": [2]}
    assert fit.n_obs == int((df.grp != 2).sum())


@pytest.fixture(scope="module")
def panels():
    pop = generate_population(PopulationConfig(n_households=400), 21)
    return {
        "biased": simulate_panel(pop, ModelParams(1.73, 15.2), 21),
        "frictionless": simulate_panel(pop, ModelParams(1.0, 0.0), 21),
    }


def test_triple_diff_collinear(panels):
    p = panels["biased"].copy()
    p["post_bill"] = p["post_service"]
    with pytest.raises(RankDeficientError):
        triple_diff(p)


def test_triple_diff_runs_with_all_control_modes(panels):
    out = {m: triple_diff(panels["biased"], event_time=m) for m in ("none", "linear", "dummies")}
    for b1, b2, fit in out.values():
        assert fit.converged and b1 > 0
    assert any(n.startswith("since_service_") for n in out["dummies"][2].names)
    with pytest.raises(ValueError):
        triple_diff(panels["biased"], event_time="cubic")


@pytest.mark.filterwarnings("ignore::billsim.econometrics.SeparationWarning")
def test_event_study_window_one(panels):
    r = event_study(panels["biased"], 1)
    assert r.k.tolist() == [0, 1]
    assert len(r.gamma) == 2
    with pytest.raises(ValueError):
        event_study(panels["biased"], 0)


@pytest.mark.filterwarnings("ignore::billsim.econometrics.SeparationWarning")
def test_event_study_frictionless_null(panels):
    r = event_study(panels["frictionless"], 4)
    assert np.all(np.abs(r.gamma / r.se) < 3.5)


def test_placebo_identity_and_errors(panels):
    p = panels["biased"]
    # force every index bill to arrive three weeks after service, then redraw from a point mass at 3;
    # a constant delay makes post_bill collinear with weeks-since-service dummies, so use the bare design
    idx = p["shoppable_flag"] == 1
    p2 = reassign_bills(p, np.full(int(idx.sum()), 3))
    p2.loc[idx, "claim_bill_week"] = (p2.loc[idx, "week"] + 3).astype("Int64")
    _, actual, _ = triple_diff(p2, event_time="none")
    r = placebo(p2, 1, seed=3, delays=BillDelayDistribution.point_mass(3), event_time="none")
    assert r.draws[0] == pytest.approx(actual, abs=1e-9)
    assert r.actual == pytest.approx(actual, abs=1e-12)
    assert empirical_delay_pmf(p2).pmf[3] == 1.0
    with pytest.raises(ValueError):
        placebo(p, 0, seed=1)


def test_reassign_bills_sets_post_bill(panels):
    p = panels["biased"]
    n_ev = int((p["shoppable_flag"] == 1).sum())
    q = reassign_bills(p, np.zeros(n_ev, dtype=int))
    assert np.array_equal(q["post_bill"].to_numpy(), q["post_service"].to_numpy())
    with pytest.raises(ValueError):
        reassign_bills(p, np.zeros(n_ev + 1))

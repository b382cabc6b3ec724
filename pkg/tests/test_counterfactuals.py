import json

import numpy as np
import pytest

from billsim.beliefs import LearningParams
from billsim.contract import CostSharingContract
from billsim.counterfactuals import (
    COUNTERFACTUALS,
    compare,
    full_information,
    learning_counterfactual,
    recenter_beta,
)
from billsim.simulator import ModelParams, PopulationConfig, generate_population


@pytest.fixture(scope="module")
def pop():
    return generate_population(PopulationConfig(n_households=150), 21)


def test_unbiased_baseline_recenter_is_identity(pop):
    rep = recenter_beta(ModelParams(1.0, 12.0), pop, seed=3, n_replicates=2)
    assert np.all(rep.per_household.delta == 0.0)
    assert rep.share_households_changed == 0.0


def test_zero_deductible_contract_unchanged():
    cfg = PopulationConfig(n_households=80, contracts=(CostSharingContract(0.0, 0.2, 6000.0),))
    p0 = generate_population(cfg, 2)
    rep = full_information(ModelParams(1.73, 15.2), p0, seed=2)
    assert np.allclose(rep.per_household.delta, 0.0, atol=1e-9)


def test_frictionless_baseline_is_fixed_point(pop):
    base = ModelParams(1.0, 0.0, instant_bills=True)
    rep = full_information(base, pop, seed=4, n_replicates=2)
    assert np.all(rep.per_household.delta == 0.0)


def test_bias_lowers_spending_under_recentering(pop):
    rep = recenter_beta(ModelParams(1.73, 15.2), pop, seed=5, n_replicates=3)
    ph = rep.per_household
    assert rep.mean_delta > 0
    assert 0 < rep.share_households_changed < 1
    # households that never spend anything cannot change
    assert np.all(ph.delta[ph.baseline_spend == 0] == 0)
    # percent deltas skip zero counterfactual spending
    assert rep.n_zero_counterfactual == int((ph.counterfactual_spend == 0).sum())


def test_common_draws_across_regimes(pop):
    a = recenter_beta(ModelParams(1.73, 15.2), pop, seed=6)
    b = full_information(ModelParams(1.73, 15.2), pop, seed=6)
    assert a.extra["draws_checksum"] == b.extra["draws_checksum"]
    np.testing.assert_array_equal(a.per_household.baseline_spend, b.per_household.baseline_spend)


def test_learning_counterfactual(pop):
    lp = LearningParams(2.58, 0.12**2, 0.09**2)
    base = ModelParams(sigma_s=15.0, learning=lp)
    rep = learning_counterfactual(base, pop, seed=7, n_replicates=2)
    assert rep.mean_delta > 0
    # beliefs converge, so the weekly gap narrows late in the year
    w = rep.weekly_delta
    assert w[-10:].mean() < w[5:15].mean()
    same = learning_counterfactual(ModelParams(sigma_s=15.0, learning=LearningParams(1.0, 0.0, 0.0081)), pop, seed=7)
    assert np.all(same.per_household.delta == 0.0)
    with pytest.raises(ValueError):
        learning_counterfactual(ModelParams(1.73, 15.2), pop, seed=7)


def test_subset_and_outputs(pop, tmp_path):
    rep = compare(pop, ModelParams(1.73, 15.2), ModelParams(1.0, 15.2), seed=8, years=2, mode="recenter")
    assert len(rep.per_household) == 2 * pop.size
    unmet = rep.subset(~rep.per_household.met_deductible.to_numpy())
    assert len(unmet.per_household) == int((~rep.per_household.met_deductible).sum())
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    s = json.loads((tmp_path / "r.json").read_text())
    assert s["mode"] == "recenter" and len(s["weekly_mean_delta"]) == pop.weeks
    assert s["mean_delta"] == pytest.approx(rep.mean_delta)
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("household_id,year_index")
    with pytest.raises(ValueError):
        compare(pop, ModelParams(), ModelParams(), seed=1, n_replicates=0)


def test_registry():
    assert set(COUNTERFACTUALS) == {"recenter", "fullinfo", "learning"}

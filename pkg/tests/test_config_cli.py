import json
import math
import subprocess
import sys

import pandas as pd
import pytest

from billsim.cli import main
from billsim.config import ConfigError, describe, parse_config
from billsim.rng import DEFAULT_SEED

SMALL = """\
[run]
seed = 7
[population]
n_households = 60
[signal]
beta = 1.73
sigma_s = 15.2
[estimation]
beta_min = 1.5
beta_max = 2.0
beta_step = 0.1
sigma_min = 10
sigma_max = 20
sigma_step = 10
refine = false
n_replicates = 2
shock_draws = 8
bootstrap_draws = 0
[econometrics]
placebo_draws = 3
[counterfactual]
n_replicates = 2
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_uses_defaults(tmp_path):
    s = parse_config(write(tmp_path, "[signal]\nbeta = 1.5\n"))
    assert s.seed == DEFAULT_SEED
    assert s.params.beta == 1.5 and s.params.sigma_s == 0.0
    assert s.population.n_households == 2000
    assert s.window == 8 and s.event_time == "dummies"
    assert parse_config(text="").seed == DEFAULT_SEED
    assert parse_config(text="", seed=3).seed == 3


def test_range_error_names_line(tmp_path):
    p = write(tmp_path, "[run]\nseed = 1\n\n[contract]\ncoinsurance = 1.3\n")
    with pytest.raises(ConfigError) as e:
        parse_config(p)
    assert e.value.line == 5
    assert "coinsurance" in str(e.value) and f"{p}:5:" in str(e.value)


def test_unknown_key_suggests(tmp_path):
    with pytest.raises(ConfigError) as e:
        parse_config(write(tmp_path, "[signal]\nbetta = 1.2\n"))
    assert "did you mean 'beta'" in str(e.value) and e.value.line == 2
    with pytest.raises(ConfigError):
        parse_config(text="[signl]\nbeta = 1\n")
    with pytest.raises(ConfigError):
        parse_config(text="[signal]\nbeta = abc\n")


def test_missing_cell_table(tmp_path):
    with pytest.raises(FileNotFoundError) as e:
        parse_config(write(tmp_path, "[population]\ncell_table = nowhere.csv\n"))
    assert str(tmp_path / "nowhere.csv") in str(e.value)


def test_cell_table_relative_to_config(tmp_path):
    pd.DataFrame({"cell_id": ["a", "b"], "mean": [100.0, 200.0], "median": [-50.0, -80.0],
                  "sd": [300.0, 500.0]}).to_csv(tmp_path / "cells.csv", index=False)
    s = parse_config(write(tmp_path, "[population]\ncell_table = cells.csv\n"))
    assert set(s.population.cell_moments) == {"a", "b"}


def test_describe_lists_every_section():
    text = describe()
    for sec in ("run", "population", "contract", "signal", "learning", "delays", "events", "estimation",
                "econometrics", "counterfactual"):
        assert f"[{sec}]" in text


def test_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "[contract]\ncoinsurance = 1.3\n", "bad.ini")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["error"] == "ConfigError"
    assert main(["tripdiff", "--panel", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "t.json")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 1
    assert main([]) == 2
    assert main(["--show-keys"]) == 0
    assert main(["--threads", "0", "generate", "--out", str(tmp_path / "g")]) == 2


def test_simulate_is_reproducible(tmp_path):
    cfg = write(tmp_path, SMALL)
    for d in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / d)]) == 0
    for f in ("panel.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 7 and man["subcommand"] == "simulate"


def test_end_to_end(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "pop")]) == 0
    pop = str(tmp_path / "pop" / "population.csv")
    assert main(["simulate", "--config", str(cfg), "--population", pop, "--out", str(tmp_path / "sim")]) == 0
    panel = str(tmp_path / "sim" / "panel.csv")
    assert main(["estimate", "--config", str(cfg), "--observed", panel, "--population", pop,
                 "--out", str(tmp_path / "est.json")]) == 0
    res = json.loads((tmp_path / "est.json").read_text())
    assert set(res["best_params"]) == {"beta", "sigma_s"}
    assert (tmp_path / "est_profile.csv").exists() and (tmp_path / "est_manifest.json").exists()
    assert main(["counterfactual", "--config", str(cfg), "--params", str(tmp_path / "est.json"),
                 "--population", pop, "--mode", "recenter", "--out", str(tmp_path / "cf.json")]) == 0
    assert "share_reduced" in json.loads((tmp_path / "cf.json").read_text())
    assert main(["tripdiff", "--config", str(cfg), "--panel", panel, "--out", str(tmp_path / "td.json")]) == 0
    td = json.loads((tmp_path / "td.json").read_text())
    assert td["effect_post_bill"] == pytest.approx(math.expm1(td["beta_post_bill"]))


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "billsim", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "billsim" in r.stdout

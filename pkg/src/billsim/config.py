"""Run configuration: flat ``key = value`` text with ``[section]`` headers.

Every key is registered below with its type and default, so an empty file is
a valid configuration.  Errors name the file and line of the offending entry.
"""
from __future__ import annotations

import configparser
import difflib
import math
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from billsim import rng as rngmod
from billsim.beliefs import LearningParams
from billsim.contract import ContractError, CostSharingContract
from billsim.estimation import EstimationConfig, GridAxis, LearningGrid
from billsim.econometrics import RegressionSpec
from billsim.shocks import CalibrationError, CellMoments
from billsim.simulator import BillDelayDistribution, EventSpec, ModelParams, PopulationConfig, default_cell_moments


class ConfigError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.path, self.line = path, line


def _floats(s):
    return tuple(float(x) for x in s.replace(";", ",").split(",") if x.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _pmf(s):
    out = {}
    for part in s.split(","):
        if part.strip():
            k, v = part.split(":")
            out[int(k)] = float(v)
    return out


def _opt_float(s):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


# section -> key -> (parser, default, help)
REGISTRY = {
    "run": {
        "seed": (int, rngmod.DEFAULT_SEED, "64-bit unsigned master seed"),
        "years": (lambda s: tuple(int(x) for x in _floats(s)), (2012,), "plan years to simulate"),
    },
    "population": {
        "n_households": (int, 2000, "number of households"),
        "household_sizes": (_pmf, {2: 0.35, 3: 0.25, 4: 0.25, 5: 0.15}, "size:probability list"),
        "omega_median": (float, 300.0, "median member moral-hazard parameter"),
        "omega_log_sd": (float, 0.5, "log sd of member moral hazard"),
        "cell_table": (str, None, "CSV with cell_id, mean, median, sd (and optional weight)"),
        "cv_rule": (str, "moment", "shifted-lognormal calibration rule: moment or exact"),
    },
    "contract": {
        "deductible": (float, 1000.0, "family deductible"),
        "coinsurance": (float, 0.2, "coinsurance rate in [0, 1]"),
        "oop_max": (float, 6000.0, "family out-of-pocket maximum"),
        "weeks": (int, 52, "plan-year length in weeks"),
    },
    "signal": {
        "beta": (float, 1.0, "multiplicative bias of pre-bill signals"),
        "sigma_s": (float, 0.0, "signal noise sd per pending claim"),
        "instant_bills": (_bool, False, "force every bill delay to zero"),
    },
    "learning": {
        "enabled": (_bool, False, "households learn the bias from bills"),
        "prior_mean": (float, 2.58, "prior mean of the bias"),
        "prior_sd": (float, 0.12, "prior sd of the bias"),
        "signal_sd": (float, 0.09, "sd of the bias signal carried by each bill"),
    },
    "delays": {
        "pmf_file": (str, None, "CSV with delay_weeks, probability"),
        "share_within": (float, 0.6, "geometric default: Pr(delay <= within_weeks)"),
        "within_weeks": (int, 4, "geometric default: horizon of share_within"),
        "max_delay": (int, 26, "geometric default: truncation point"),
    },
    "events": {
        "threshold": (_opt_float, None, "index-event spending threshold; blank uses the quantile"),
        "quantile": (float, 0.75, "spending quantile used when threshold is blank"),
    },
    "estimation": {
        "model": (str, "static", "static or learning"),
        "beta_min": (float, 0.5, ""), "beta_max": (float, 3.0, ""), "beta_step": (float, 0.05, ""),
        "sigma_min": (float, 0.0, ""), "sigma_max": (float, 60.0, ""), "sigma_step": (float, 5.0, ""),
        "refine": (_bool, True, "refine around the coarse argmin"),
        "refine_beta_step": (float, 0.01, ""), "refine_beta_halfwidth": (float, 0.05, ""),
        "refine_sigma_step": (float, 1.0, ""), "refine_sigma_halfwidth": (float, 5.0, ""),
        "n_replicates": (int, 50, "simulation replicates per grid point"),
        "bootstrap_draws": (int, 200, "household bootstrap draws (0 skips the bootstrap)"),
        "shock_draws": (int, 64, "shock draws per household and replicate"),
        "quad_nodes": (int, 16, "quadrature nodes over signal noise"),
        "price_nodes": (int, 33, "interpolation nodes over the perceived price gap"),
        "objective_mode": (str, "conditional", "conditional or simulated"),
        "shock_cap_mode": (str, "off", "off or clip_to_observed"),
        "prior_mean_grid": (_floats, LearningGrid.prior_mean, "learning model grid"),
        "prior_var_grid": (_floats, LearningGrid.prior_var, "learning model grid"),
        "sigma_s_grid": (_floats, LearningGrid.sigma_s, "learning model grid"),
        "signal_var_grid": (_floats, LearningGrid.signal_var, "learning model grid"),
    },
    "econometrics": {
        "window": (int, 8, "event-study window T"),
        "placebo_draws": (int, 200, "placebo redraws"),
        "event_time": (str, "dummies", "weeks-since-service controls: dummies, linear or none"),
        "drop_index_week": (_bool, True, "exclude the index week from the regressions"),
        "max_iter": (int, 100, "IRLS iteration cap"),
        "tol": (float, 1e-8, "relative deviance tolerance"),
    },
    "counterfactual": {
        "n_replicates": (int, 50, "replicates averaged per household"),
    },
}


@dataclass
class Settings:
    """Validated configuration for every subcommand."""

    seed: int
    years: tuple
    population: PopulationConfig
    params: ModelParams
    delays: BillDelayDistribution
    events: EventSpec
    estimation: EstimationConfig
    estimation_model: str
    learning_grid: LearningGrid
    regression: RegressionSpec
    window: int
    placebo_draws: int
    event_time: str
    drop_index_week: bool
    cf_replicates: int
    raw: dict = field(default_factory=dict)
    source: str | None = None


def _line_index(text: str) -> dict:
    """Map (section, key) and section headers to 1-based line numbers."""
    out, sec = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            sec = s[1:-1].strip().lower()
            out.setdefault((sec, None), i)
        elif sec is not None:
            for sep in ("=", ":"):
                if sep in s:
                    out.setdefault((sec, s.split(sep, 1)[0].strip().lower()), i)
                    break
    return out


def _suggest(word, options) -> str:
    near = difflib.get_close_matches(word, list(options), n=1, cutoff=0.5)
    return f"; did you mean {near[0]!r}?" if near else f"; valid: {', '.join(sorted(options))}"


def read_values(path=None, text: str | None = None) -> tuple:
    """Parse and type-check every entry; returns (values by section, line index)."""
    name = str(path) if path is not None else "<config>"
    if text is None:
        if path is None:
            text = ""
        else:
            p = Path(path)
            if not p.exists():
                raise ConfigError("configuration file not found", name)
            text = p.read_text()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=name)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse: {e.message if hasattr(e, 'message') else e}", name,
                          getattr(e, "lineno", None)) from None
    lines = _line_index(text)
    vals = {sec: {k: v[1] for k, v in keys.items()} for sec, keys in REGISTRY.items()}
    for sec in cp.sections():
        key_sec = sec.lower()
        if key_sec not in REGISTRY:
            raise ConfigError(f"unknown section [{sec}]" + _suggest(key_sec, REGISTRY), name, lines.get((key_sec, None)))
        for k, raw in cp.items(sec):
            if k not in REGISTRY[key_sec]:
                raise ConfigError(f"unknown key {k!r} in [{sec}]" + _suggest(k, REGISTRY[key_sec]), name,
                                  lines.get((key_sec, k)))
            parser = REGISTRY[key_sec][k][0]
            try:
                vals[key_sec][k] = parser(raw)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"bad value for [{sec}] {k} = {raw!r}: {e}", name, lines.get((key_sec, k))) from None
    return vals, lines, name


def read_cell_table(path, base: Path | None = None) -> tuple:
    p = Path(path)
    if base is not None and not p.is_absolute():
        p = base / p
    if not p.exists():
        raise FileNotFoundError(f"cell table not found: {p}")
    df = pd.read_csv(p)
    need = {"cell_id", "mean", "median", "sd"}
    if not need <= set(df.columns):
        raise ValueError(f"{p}: cell table needs columns {sorted(need)}")
    cells = {str(r.cell_id): CellMoments(float(r.mean), float(r.median), float(r.sd)) for r in df.itertuples()}
    weights = None
    if "weight" in df.columns:
        weights = {str(c): float(w) for c, w in zip(df["cell_id"], df["weight"])}
    return cells, weights


def parse_config(path=None, text: str | None = None, seed: int | None = None) -> Settings:
    """Read, fill defaults and validate a configuration.

    ``seed`` overrides ``[run] seed``.  Errors raise :class:`ConfigError`
    pointing at the offending line (``FileNotFoundError`` for missing tables).
    """
    vals, lines, name = read_values(path, text)
    base = Path(path).parent if path is not None else None

    def fail(sec, key, msg):
        raise ConfigError(msg, name, lines.get((sec, key)))

    run = vals["run"]
    if seed is not None:
        run["seed"] = seed
    if not 0 <= run["seed"] < 2**64:
        fail("run", "seed", f"seed must be a 64-bit unsigned integer, got {run['seed']}")

    c = vals["contract"]
    try:
        contract = CostSharingContract(c["deductible"], c["coinsurance"], c["oop_max"], c["weeks"])
    except ContractError as e:
        bad = "coinsurance" if "coinsurance" in str(e) else ("oop_max" if "oop_max" in str(e) else
                                                             ("weeks" if "weeks" in str(e) else "deductible"))
        fail("contract", bad, f"contract: {e}")

    pc = vals["population"]
    if pc["cv_rule"] not in ("moment", "exact"):
        fail("population", "cv_rule", f"cv_rule must be moment or exact, got {pc['cv_rule']!r}")
    if not pc["omega_median"] > 0:
        fail("population", "omega_median", "omega_median must be positive")
    if pc["omega_log_sd"] < 0:
        fail("population", "omega_log_sd", "omega_log_sd must be non-negative")
    cells, weights = default_cell_moments(), None
    if pc["cell_table"]:
        try:
            cells, weights = read_cell_table(pc["cell_table"], base)
        except CalibrationError as e:
            fail("population", "cell_table", f"cell table: {e}")
    try:
        popcfg = PopulationConfig(
            n_households=pc["n_households"], size_pmf=pc["household_sizes"], cell_moments=cells,
            cell_weights=weights, contracts=(contract,), omega_log_mean=math.log(pc["omega_median"]),
            omega_log_sd=pc["omega_log_sd"], cv_rule=pc["cv_rule"],
        )
    except ValueError as e:
        key = "household_sizes" if "size" in str(e) else "n_households"
        fail("population", key, f"population: {e}")

    s = vals["signal"]
    lv = vals["learning"]
    learning = None
    if lv["enabled"]:
        if lv["prior_sd"] < 0 or lv["signal_sd"] < 0:
            fail("learning", "prior_sd" if lv["prior_sd"] < 0 else "signal_sd", "learning sds must be non-negative")
        learning = LearningParams(lv["prior_mean"], lv["prior_sd"] ** 2, lv["signal_sd"] ** 2)
    if not s["beta"] > 0:
        fail("signal", "beta", f"beta must be positive, got {s['beta']}")
    if s["sigma_s"] < 0:
        fail("signal", "sigma_s", f"sigma_s must be non-negative, got {s['sigma_s']}")
    params = ModelParams(s["beta"], s["sigma_s"], learning, s["instant_bills"])

    dv = vals["delays"]
    if dv["pmf_file"]:
        p = Path(dv["pmf_file"])
        if base is not None and not p.is_absolute():
            p = base / p
        delays = BillDelayDistribution.from_csv(p)
    else:
        if not 0 < dv["share_within"] < 1:
            fail("delays", "share_within", "share_within must lie strictly between 0 and 1")
        if not 0 <= dv["within_weeks"] < dv["max_delay"]:
            fail("delays", "within_weeks", "within_weeks must be non-negative and below max_delay")
        delays = BillDelayDistribution.geometric(dv["share_within"], dv["within_weeks"], dv["max_delay"])

    ev = vals["events"]
    if not 0 <= ev["quantile"] <= 1:
        fail("events", "quantile", "quantile must lie in [0, 1]")
    events = EventSpec(ev["threshold"], ev["quantile"])

    e = vals["estimation"]
    if e["model"] not in ("static", "learning"):
        fail("estimation", "model", f"model must be static or learning, got {e['model']!r}")
    try:
        bgrid = GridAxis(e["beta_min"], e["beta_max"], e["beta_step"])
    except ValueError as err:
        fail("estimation", "beta_step", str(err))
    if bgrid.lo <= 0:
        fail("estimation", "beta_min", "beta grid must be positive")
    try:
        sgrid = GridAxis(e["sigma_min"], e["sigma_max"], e["sigma_step"])
    except ValueError as err:
        fail("estimation", "sigma_step", str(err))
    if sgrid.lo < 0:
        fail("estimation", "sigma_min", "sigma grid must be non-negative")
    if e["bootstrap_draws"] == 1:
        fail("estimation", "bootstrap_draws", "bootstrap needs 0 (off) or at least 2 draws")
    for k in ("prior_mean_grid", "prior_var_grid", "sigma_s_grid", "signal_var_grid"):
        if not e[k]:
            fail("estimation", k, f"{k} is empty")
    try:
        est = EstimationConfig(
            beta_grid=bgrid, sigma_grid=sgrid, refine=e["refine"], refine_beta_step=e["refine_beta_step"],
            refine_beta_halfwidth=e["refine_beta_halfwidth"], refine_sigma_step=e["refine_sigma_step"],
            refine_sigma_halfwidth=e["refine_sigma_halfwidth"], n_replicates=e["n_replicates"], seed=run["seed"],
            bootstrap_draws=e["bootstrap_draws"], shock_draws=e["shock_draws"], quad_nodes=e["quad_nodes"],
            price_nodes=e["price_nodes"], objective_mode=e["objective_mode"], shock_cap_mode=e["shock_cap_mode"],
        )
    except ValueError as err:
        msg = str(err)
        key = next((k for k in ("n_replicates", "objective_mode", "shock_cap_mode", "shock_draws") if k in msg),
                   "n_replicates")
        fail("estimation", key, msg)
    lgrid = LearningGrid(e["prior_mean_grid"], e["prior_var_grid"], e["sigma_s_grid"], e["signal_var_grid"])

    m = vals["econometrics"]
    if m["window"] < 1:
        fail("econometrics", "window", "window must be >= 1")
    if m["placebo_draws"] < 1:
        fail("econometrics", "placebo_draws", "placebo_draws must be >= 1")
    if m["event_time"] not in ("dummies", "linear", "none"):
        fail("econometrics", "event_time", f"event_time must be dummies, linear or none, got {m['event_time']!r}")
    reg = RegressionSpec(max_iter=m["max_iter"], tol=m["tol"])

    if vals["counterfactual"]["n_replicates"] < 1:
        fail("counterfactual", "n_replicates", "n_replicates must be >= 1")

    return Settings(
        seed=run["seed"], years=run["years"], population=popcfg, params=params, delays=delays, events=events,
        estimation=est, estimation_model=e["model"], learning_grid=lgrid, regression=reg, window=m["window"],
        placebo_draws=m["placebo_draws"], event_time=m["event_time"], drop_index_week=m["drop_index_week"],
        cf_replicates=vals["counterfactual"]["n_replicates"], raw=vals, source=name,
    )


def describe() -> str:
    """Human-readable key registry."""
    rows = []
    for sec, keys in REGISTRY.items():
        rows.append(f"[{sec}]")
        for k, (_, default, hlp) in keys.items():
            rows.append(f"  {k} = {default!r}" + (f"    # {hlp}" if hlp else ""))
    return "\n".join(rows)

"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print a one-line JSON object to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

import billsim
from billsim import config as cfgmod
from billsim import counterfactuals as cf
from billsim import econometrics as em
from billsim import estimation as est
from billsim.beliefs import LearningParams
from billsim.shocks import calibrate_cell
from billsim.simulator import ModelParams, Population, generate_population, read_panel, simulate_panel, write_panel

log = logging.getLogger("billsim")


class UsageError(Exception):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=False)
        fh.write("\n")


def write_manifest(path, subcommand, settings, inputs: dict, outputs: list, options: dict | None = None) -> None:
    """Everything needed to rerun: version, seed, resolved configuration, input and output hashes."""
    man = {
        "tool": "billsim",
        "version": billsim.__version__,
        "subcommand": subcommand,
        "seed": settings.seed,
        "options": options or {},
        "config": settings.raw,
        "inputs": {k: {"file": Path(v).name, "sha256": sha256(v)} for k, v in inputs.items() if v},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
    }
    write_json(man, path)


def _settings(args):
    return cfgmod.parse_config(args.config, seed=args.seed)


def _population(settings, path=None) -> Population:
    if path:
        cells = {cid: calibrate_cell(m, cid, settings.population.cv_rule)
                 for cid, m in settings.population.cell_moments.items()}
        return Population.from_csv(path, cells, settings.population.contracts[0].plan_year_weeks)
    return generate_population(settings.population, settings.seed)


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    s = _settings(args)
    out = _outdir(args.out)
    pop = generate_population(s.population, s.seed)
    pop_path, cell_path = out / "population.csv", out / "cells.csv"
    pop.to_csv(pop_path)
    pd.DataFrame([{"cell_id": cid, "mean": m.mean, "median": m.median, "sd": m.sd}
                  for cid, m in s.population.cell_moments.items()]).to_csv(cell_path, index=False, lineterminator="\n")
    write_manifest(out / "manifest.json", "generate", s, {"config": args.config}, [pop_path, cell_path])
    log.info("wrote %d households to %s", pop.size, pop_path)


def cmd_simulate(args):
    s = _settings(args)
    out = _outdir(args.out)
    pop = _population(s, args.population)
    panel = simulate_panel(pop, s.params, s.seed, args.replicate, s.delays, s.years, s.events)
    path = out / "panel.csv"
    write_panel(panel, path)
    write_manifest(out / "manifest.json", "simulate", s, {"config": args.config, "population": args.population},
                   [path], {"replicate": args.replicate})
    log.info("wrote %d rows to %s", len(panel), path)


def cmd_estimate(args):
    s = _settings(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    observed = read_panel(args.observed)
    pop = _population(s, args.population)
    if s.estimation_model == "learning":
        res = est.learning_grid_search(observed, s.estimation, pop, s.learning_grid)
    else:
        keep = s.estimation.bootstrap_draws >= 2
        res = est.grid_search(observed, s.estimation, pop, s.delays, keep_sse=keep)
        if keep:
            est.bootstrap_ci(observed, s.estimation, pop, res)
        res.diagnostics.pop("_points", None)
        res.diagnostics.pop("_sse", None)
    prof = _sidecar(out, "_profile.csv")
    est.write_profile(res, prof)
    write_json(res.to_dict(), out)
    write_manifest(_sidecar(out, "_manifest.json"), "estimate", s,
                   {"config": args.config, "observed": args.observed, "population": args.population}, [out, prof])
    log.info("best %s", res.best_params)


def _params_from_json(path, base: ModelParams) -> ModelParams:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"parameter file not found: {p}")
    d = json.loads(p.read_text())
    d = d.get("best_params", d)
    learning = None
    if "prior_mean" in d:
        learning = LearningParams(float(d["prior_mean"]), float(d["prior_var"]), float(d["signal_var"]))
    return ModelParams(float(d.get("beta", base.beta)), float(d.get("sigma_s", base.sigma_s)), learning,
                       base.instant_bills)


def cmd_counterfactual(args):
    s = _settings(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params = _params_from_json(args.params, s.params) if args.params else s.params
    pop = _population(s, args.population)
    fn = cf.COUNTERFACTUALS[args.mode]
    rep = fn(params, pop, s.seed, n_replicates=s.cf_replicates, delays=s.delays)
    csv_path = out.with_suffix(".csv")
    rep.to_json(out)
    rep.to_csv(csv_path)
    write_manifest(_sidecar(out, "_manifest.json"), "counterfactual", s,
                   {"config": args.config, "params": args.params, "population": args.population}, [out, csv_path],
                   {"mode": args.mode})
    log.info("share reduced %.3f, mean delta %.2f", rep.share_reduced, rep.mean_delta)


def _fit_summary(fit: em.FitResult) -> dict:
    return {"n_obs": fit.n_obs, "n_clusters": fit.n_clusters, "iterations": fit.iterations,
            "converged": fit.converged, "deviance": fit.deviance,
            "dropped_levels": {k: len(v) for k, v in fit.dropped_levels.items()}}


def cmd_tripdiff(args):
    s = _settings(args)
    panel = read_panel(args.panel)
    b1, b2, fit = em.triple_diff(panel, s.regression, s.drop_index_week, s.event_time)
    res = {
        "beta_post_service": b1, "se_post_service": fit.se_of("post_service"),
        "beta_post_bill": b2, "se_post_bill": fit.se_of("post_bill"),
        "z_post_bill": b2 / fit.se_of("post_bill"),
        "effect_post_service": math.expm1(b1), "effect_post_bill": math.expm1(b2),
        "event_time_controls": s.event_time, **_fit_summary(fit),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(res, out)
    write_manifest(_sidecar(out, "_manifest.json"), "tripdiff", s, {"config": args.config, "panel": args.panel}, [out])


def cmd_eventstudy(args):
    s = _settings(args)
    panel = read_panel(args.panel)
    T = args.window or s.window
    r = em.event_study(panel, T, s.regression, s.drop_index_week, s.event_time)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out.with_suffix(".csv")
    pd.DataFrame(r.rows()).to_csv(csv_path, index=False, lineterminator="\n")
    write_json({"window": T, "coefficients": r.rows(), **_fit_summary(r.fit)}, out)
    write_manifest(_sidecar(out, "_manifest.json"), "eventstudy", s, {"config": args.config, "panel": args.panel},
                   [out, csv_path])


def cmd_placebo(args):
    s = _settings(args)
    panel = read_panel(args.panel)
    n = args.draws or s.placebo_draws
    r = em.placebo(panel, n, s.seed, None, s.regression, s.drop_index_week, s.event_time)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(r.to_dict(), out)
    write_manifest(_sidecar(out, "_manifest.json"), "placebo", s, {"config": args.config, "panel": args.panel}, [out])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="billsim", description=billsim.__doc__)
    p.add_argument("--version", action="version", version=f"billsim {billsim.__version__}")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="BLAS threads (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--show-keys", action="store_true", help="print the configuration key registry and exit")
    sub = p.add_subparsers(dest="command", metavar="subcommand")

    def common(sp):
        sp.add_argument("--config", help="configuration file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override [run] seed")

    sp = sub.add_parser("generate", help="draw a synthetic population")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("simulate", help="simulate a household-week panel")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--population", help="population CSV from generate (else drawn from the config)")
    sp.add_argument("--replicate", type=int, default=0)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate", help="grid-search the signal parameters")
    common(sp)
    sp.add_argument("--observed", required=True, help="panel CSV")
    sp.add_argument("--out", required=True, help="result JSON (profile CSV written alongside)")
    sp.add_argument("--population", help="population CSV the panel was simulated from")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("counterfactual", help="spending change under another information regime")
    common(sp)
    sp.add_argument("--params", help="JSON with beta/sigma_s (or learning parameters); estimate output works")
    sp.add_argument("--mode", required=True, choices=sorted(cf.COUNTERFACTUALS))
    sp.add_argument("--out", required=True, help="summary JSON (per-household CSV written alongside)")
    sp.add_argument("--population", help="population CSV")
    sp.set_defaults(func=cmd_counterfactual)

    for name, fn, hlp in (("tripdiff", cmd_tripdiff, "post-service / post-bill Poisson regression"),
                          ("eventstudy", cmd_eventstudy, "weeks-to-bill event study"),
                          ("placebo", cmd_placebo, "placebo distribution of the post-bill coefficient")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--panel", required=True, help="panel CSV")
        sp.add_argument("--out", required=True, help="result JSON")
        if name == "eventstudy":
            sp.add_argument("--window", type=int, help="override [econometrics] window")
        if name == "placebo":
            sp.add_argument("--draws", type=int, help="override [econometrics] placebo_draws")
        sp.set_defaults(func=fn)
    return p


def _fail(code, exc) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.show_keys:
        print(cfgmod.describe())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.threads < 1:
        return _fail(2, UsageError("--threads must be >= 1"))
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (cfgmod.ConfigError, UsageError) as e:
        return _fail(2, e)
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error and exit 1
        log.debug("failure", exc_info=True)
        return _fail(1, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())

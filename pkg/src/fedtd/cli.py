"""``fedtd`` command line: gen-env, solve, run, sweep, rate, verify.

Config precedence, lowest first: built-in defaults (or a recipe), the
``--config`` file, ``--paper-scale``, ``--seed``/``--stride``, then each
``--set key=value`` in order. Every artifact written embeds the resolved
config it came from.

Exit codes: 0 ok, 2 config/schema error, 3 numerical failure or
heterogeneity violation, 4 divergence, 1 anything else (I/O).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .envgen import (
    AgentFamily,
    HeterogeneityBudget,
    gen_agent_family,
    gen_feature_matrix,
    gen_policy,
    verify_heterogeneity,
)
from .errors import (
    ConfigError,
    DivergenceError,
    FedTdError,
    FitError,
    HeterogeneityViolation,
)
from .experiments import (
    AggregateResult,
    Cell,
    ExperimentConfig,
    FamilyCache,
    aggregate_runs,
    export,
    family_diagnostics,
    fit_loglog_rate,
    run_cell,
    run_experiment,
    speedup_ratio,
)
from .ground_truth import gap_constants, solve_agent, solve_global
from .kernels import BACKEND
from .mdp import check_ergodic
from .recipes import PAPER_SCALE, RECIPE_NAMES, recipe
from .sampling import estimate_mixing
from .serialize import read_csv, read_json, to_jsonable, write_csv, write_json

SUBCOMMANDS = ("gen-env", "solve", "run", "sweep", "rate", "verify")


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected key=value, got {item!r}", "--set")
        try:
            out[key] = yaml.safe_load(raw) if raw.strip() else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value {raw!r} ({exc})", key) from None
    return out


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file ({exc.strerror})", "--config") from None
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file ({exc})", "--config") from None
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a mapping", "<root>")
    return obj


def resolve_config(args, base: dict | None = None, seed_field: str = "master_seed") -> ExperimentConfig:
    obj = dict(base or {})
    if getattr(args, "config", None):
        obj.update(load_config_file(args.config))
    if getattr(args, "paper_scale", False):
        obj.update(PAPER_SCALE)
    if getattr(args, "seed", None) is not None:
        obj[seed_field] = args.seed
    if getattr(args, "stride", None) is not None:
        obj["stride"] = args.stride
    obj.update(parse_overrides(getattr(args, "set", None)))
    return ExperimentConfig.from_dict(obj)


def provenance(cfg: ExperimentConfig, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, "config": cfg.to_dict(), **extra}


def _one_line(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def _family_groups(cfg: ExperimentConfig) -> list[Cell]:
    seen, out = set(), []
    for cell in cfg.cells():
        key = (cell.n_agents, cell.eps_p, cell.eps_r, cell.r_max)
        if key not in seen:
            seen.add(key)
            out.append(cell)
    return out


def _family_tag(cell: Cell) -> str:
    return cell.tag.replace(f"_beta={cell.beta!r}", "")


def _load_family(path) -> AgentFamily:
    try:
        obj = read_json(path)
    except OSError as exc:
        raise ConfigError(f"cannot read family file ({exc.strerror})", "--family") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"family file is not valid JSON ({exc})", "--family") from None
    return AgentFamily.from_dict(obj)


def _single_family(args, cfg: ExperimentConfig) -> AgentFamily:
    if args.family:
        return _load_family(args.family)
    groups = _family_groups(cfg)
    if len(groups) != 1:
        raise ConfigError("config describes several families; pass --family or a single cell", "n_agents")
    return FamilyCache(cfg).prepared(groups[0]).family


def cmd_gen_env(args) -> int:
    cfg = resolve_config(args, seed_field="env_seed")
    out = Path(args.out)
    groups = _family_groups(cfg)
    policy = gen_policy(cfg.n_states, cfg.n_actions, cfg.env_seed)
    phi = gen_feature_matrix(cfg.n_states, cfg.d, True, cfg.env_seed)
    entries = []
    for cell in groups:
        budget = HeterogeneityBudget(cell.eps_p, cell.eps_r, cell.r_max)
        fam = gen_agent_family(cfg.n_states, cfg.n_actions, cell.n_agents, budget, policy, phi, cfg.env_seed)
        where = out if len(groups) == 1 else out / _family_tag(cell)
        where.mkdir(parents=True, exist_ok=True)
        eps_p_hat, eps_r_hat = verify_heterogeneity(fam)
        verdicts = [check_ergodic(c) for c in fam.chains()]
        doc = fam.to_dict()
        doc["provenance"] = provenance(cfg, "gen-env")
        write_json(where / "family.json", doc)
        manifest = {
            "provenance": provenance(cfg, "gen-env"),
            "family": "family.json",
            "seed": cfg.env_seed,
            "budget": budget.to_dict(),
            "n_agents": cell.n_agents,
            "achieved_eps_p": eps_p_hat,
            "achieved_eps_r": eps_r_hat,
            "ergodic": [{"irreducible": v.irreducible, "aperiodic": v.aperiodic, "period": v.period}
                        for v in verdicts],
        }
        write_json(where / "manifest.json", manifest)
        entries.append(str(where))
    print("\n".join(entries))
    return 0


def solve_report(fam: AgentFamily, gamma: float) -> dict:
    sols = [solve_agent(m, fam.policy, fam.phi, gamma) for m in fam.mdps]
    glob = solve_global(sols)
    gaps = gap_constants(fam.budget, fam.n_states, fam.budget.r_max, sols)
    return {
        "gamma": gamma,
        "agents": [
            {
                "r_star": s.r_star,
                "theta_star": s.theta_star,
                "vartheta_star": s.vartheta_star,
                "lambda_min_a": s.lambda_min_a,
                "lambda_min_ups": s.lambda_min_ups,
                "d_mu": s.d_mu.d,
            }
            for s in sols
        ],
        "global": {
            "r_star": glob.r_star_bar,
            "theta_star": glob.theta_star_bar,
            "vartheta_star": glob.vartheta_star_bar,
            "lambda_min_sym": glob.lambda_min_sym,
        },
        "gap_constants": gaps.to_dict(),
    }


def cmd_solve(args) -> int:
    cfg = resolve_config(args)
    fam = _single_family(args, cfg)
    report = solve_report(fam, cfg.gamma)
    report["provenance"] = provenance(cfg, "solve", family=args.family)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "solve.json", report)
    print(out / "solve.json")
    return 0


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    fam = _single_family(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"provenance": provenance(cfg, "verify", family=args.family), "budget": fam.budget.to_dict()}
    status = 0
    try:
        eps_p_hat, eps_r_hat = verify_heterogeneity(fam)
        within = eps_p_hat <= fam.budget.eps_p and eps_r_hat <= fam.budget.eps_r
        report.update(achieved_eps_p=eps_p_hat, achieved_eps_r=eps_r_hat, within_budget=within)
    except HeterogeneityViolation as exc:
        report.update(infeasible=True, violations=[list(v) for v in exc.violations[:100]])
        within = False
    chains = fam.chains()
    verdicts = [check_ergodic(c) for c in chains]
    report["ergodic"] = [{"irreducible": v.irreducible, "aperiodic": v.aperiodic, "period": v.period}
                         for v in verdicts]
    mixing = []
    for chain, v in zip(chains, verdicts):
        if not v:
            mixing.append(None)
            continue
        try:
            mixing.append(estimate_mixing(chain, cfg.mixing_horizon).to_dict())
        except FedTdError as exc:
            mixing.append({"error": str(exc)})
    report["mixing"] = mixing
    write_json(out / "verify.json", report)
    print(out / "verify.json")
    if not within or not all(verdicts):
        print("fedtd verify: family violates its heterogeneity budget or ergodicity", file=sys.stderr)
        status = 3
    return status


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    cells = cfg.cells()
    if len(cells) != 1:
        raise ConfigError(f"run takes exactly one cell, config has {len(cells)}; use sweep", "n_agents")
    cell = cells[0]
    prepared = FamilyCache(cfg).prepared(cell)
    traces = run_cell(cfg, cell, prepared, args.workers)
    n_div = sum(tr.diverged for tr in traces)
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    for k, tr in enumerate(traces):
        meta = provenance(cfg, "run", cell=cell.to_dict(), run_index=k, run_seed=tr.seed,
                          diverged=tr.diverged, diverged_at=tr.diverged_at)
        with open(out / "traces" / f"run_{k:04d}.csv", "w", newline="") as fh:
            write_csv(fh, tr.columns, tr.rows(), comment=_one_line(meta))
    if n_div > 0.10 * len(traces):
        raise DivergenceError(f"cell {cell.tag}: {n_div} of {len(traces)} runs diverged")
    agg = aggregate_runs(traces, cell)
    agg.info.update(family_diagnostics(prepared, cell, cfg.mixing_horizon))
    try:
        fits = [fit_loglog_rate(agg, cfg.resolved_window)]
    except FitError:
        fits = [None]
    export([agg], fits, out, cfg.to_dict(), comment=_one_line(provenance(cfg, "run")))
    print(out)
    return 0


def cmd_sweep(args) -> int:
    bases = [c.to_dict() for c in recipe(args.recipe, args.algorithm)] if args.recipe else [{}]
    out = Path(args.out)
    for base in bases:
        cfg = resolve_config(args, base=base)
        where = out / cfg.name if len(bases) > 1 else out
        aggs = run_experiment(cfg, args.workers)
        fits = []
        for agg in aggs:
            try:
                fits.append(fit_loglog_rate(agg, cfg.resolved_window))
            except FitError:
                fits.append(None)
        export(aggs, fits, where, cfg.to_dict(), comment=_one_line(provenance(cfg, "sweep")))
        print(where)
    return 0


def load_aggregates(in_dir) -> tuple[dict, list[AggregateResult]]:
    in_dir = Path(in_dir)
    try:
        summary = read_json(in_dir / "summary.json")
    except OSError as exc:
        raise ConfigError(f"no summary.json in {in_dir} ({exc.strerror})", "--in") from None
    aggs = []
    for entry in summary["cells"]:
        cols = read_csv(in_dir / entry["csv"])
        cell = Cell(**entry["cell"]) if entry.get("cell") else None
        aggs.append(AggregateResult(cols["t"].astype(np.int64), cols["mean"], cols["std"],
                                    entry["n_runs"], entry["n_diverged"], cols.get("mean_r"),
                                    cols.get("std_r"), cell))
    return summary, aggs


def cmd_rate(args) -> int:
    summary, aggs = load_aggregates(args.input)
    cfg = ExperimentConfig.from_dict(summary["config"]) if summary.get("config") else None
    window = tuple(args.window) if args.window else (cfg.resolved_window if cfg else None)
    fits = []
    for agg in aggs:
        fit = fit_loglog_rate(agg, window)
        fits.append({"tag": agg.cell.tag if agg.cell else None, **fit.to_dict()})
    groups: dict = {}
    for agg in aggs:
        c = agg.cell
        groups.setdefault((c.beta, c.eps_p, c.eps_r, c.r_max), {})[c.n_agents] = agg
    tables = []
    for (beta, eps_p, eps_r, r_max), by_n in groups.items():
        table = speedup_ratio(by_n, args.t_eval)
        vals = list(table.values())
        tables.append({"beta": beta, "eps_p": eps_p, "eps_r": eps_r, "r_max": r_max,
                       "table": {str(n): v for n, v in table.items()},
                       "max_over_min": max(vals) / min(vals) if min(vals) > 0 else float("inf")})
    report = {"provenance": {"command": "rate", "version": __version__, "config": summary.get("config"),
                             "window": list(window) if window else None, "t_eval": args.t_eval},
              "rate_fits": fits, "speedup": tables}
    out = Path(args.out) if args.out else Path(args.input)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "rate.json", report)
    print(out / "rate.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND})")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, help="master seed (env seed for gen-env)")
        p.add_argument("--workers", type=int, help="worker threads (default: $FEDTD_WORKERS or 1)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field; repeatable")
        p.add_argument("--stride", type=int, help="record every STRIDE-th iterate")
        p.add_argument("--paper-scale", action="store_true",
                       help="|S|=|A|=100, d=21, T=1e4, 300 runs")

    for name, out_default in (("gen-env", "fedtd-env"), ("solve", "fedtd-solve"), ("verify", "fedtd-verify")):
        p = sub.add_parser(name)
        common(p, out_default)
        if name != "gen-env":
            p.add_argument("--family", help="family.json written by gen-env")
    common(sub.add_parser("run"), "fedtd-run")
    p = sub.add_parser("sweep")
    common(p, "fedtd-sweep")
    p.add_argument("--recipe", choices=RECIPE_NAMES, help="start from a standard experiment")
    p.add_argument("--algorithm", choices=("avg", "exp"), default="avg", help="algorithm for --recipe")
    p = sub.add_parser("rate")
    p.add_argument("--in", dest="input", required=True, help="directory written by run or sweep")
    p.add_argument("--out", help="output directory (default: --in)")
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--t-eval", type=int, help="iteration for the speedup table (default: last)")
    return parser


_HANDLERS = {
    "gen-env": cmd_gen_env,
    "solve": cmd_solve,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "rate": cmd_rate,
    "verify": cmd_verify,
}


def _origin(exc: BaseException) -> str:
    frames = [f for f in traceback.extract_tb(exc.__traceback__) if f"{os.sep}fedtd{os.sep}" in f.filename]
    if not frames:
        return "fedtd"
    f = frames[-1]
    return f"{Path(f.filename).stem}.{f.name}"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("fedtd: error: --workers must be at least 1", file=sys.stderr)
        return 2
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"fedtd {args.command}: config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FedTdError as exc:
        print(f"fedtd {args.command}: {type(exc).__name__} in {_origin(exc)}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fedtd {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

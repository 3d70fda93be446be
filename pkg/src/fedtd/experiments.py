"""Multi-run orchestration: cells, aggregation, rate fits, speedup tables, export.

An experiment is a grid of cells (N x beta x eps_p x eps_r). Within a cell
the environment family is fixed and only the sample trajectories vary, run
k drawing its streams from ``derive_seed(master_seed, "run", cell_tag, k)``.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .envgen import (
    HeterogeneityBudget,
    gen_agent_family,
    gen_feature_matrix,
    gen_policy,
    verify_heterogeneity,
)
from .errors import AggregationError, ConfigError, DivergenceError, FitError
from .fed_td import (
    ALGORITHMS,
    REFERENCES,
    UPDATE_MODES,
    PreparedFamily,
    RunTrace,
    StepSchedule,
    prepare_family,
    run_fedtd,
)
from .ground_truth import gap_constants
from .rng import derive_seed
from .sampling import MODES, estimate_mixing
from .serialize import digest, format_value, write_csv, write_json

MAX_DIVERGED_FRACTION = 0.10
WORKERS_ENV = "FEDTD_WORKERS"


def auto_r_max(eps_r: float) -> float:
    """Reward scale used by the eps_r sweep: 5 * eps_r once eps_r >= 1."""
    return 5.0 * eps_r if eps_r >= 1.0 else 1.0


def default_stride(T: int) -> int:
    if T >= 100_000:
        return 100
    if T >= 10_000:
        return 10
    return 1


def _as_list(value, conv, name):
    items = value if isinstance(value, (list, tuple)) else [value]
    if not items:
        raise ConfigError("must not be empty", name)
    out = []
    for k, v in enumerate(items):
        try:
            out.append(conv(v))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad entry {v!r} ({exc})", f"{name}[{k}]") from None
    return tuple(out)


def _int(v):
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError("expected an integer")
    return int(v)


def _float(v):
    if isinstance(v, bool):
        raise ValueError("expected a number")
    return float(v)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce an experiment; list fields span the grid."""

    name: str = "experiment"
    algorithm: str = "avg"
    n_states: int = 10
    n_actions: int = 5
    d: int = 3
    n_agents: tuple = (1,)
    T: int = 10_000
    n_runs: int = 100
    beta: tuple = (0.6,)
    gamma: float = 0.3
    eps_p: tuple = (0.0,)
    eps_r: tuple = (0.0,)
    r_max: object = 1.0
    mode: str = "markovian"
    update_mode: str = "sampled"
    master_seed: int = 0
    env_seed: int = 0
    reference: str = "agent1"
    stride: int | None = None
    fit_window: tuple | None = None
    mixing_horizon: int = 100

    def __post_init__(self):
        conv = {
            "n_states": _int, "n_actions": _int, "d": _int, "T": _int, "n_runs": _int,
            "master_seed": _int, "env_seed": _int, "mixing_horizon": _int, "gamma": _float,
        }
        for name, fn in conv.items():
            try:
                object.__setattr__(self, name, fn(getattr(self, name)))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value {getattr(self, name)!r} ({exc})", name) from None
        for name, fn in (("n_agents", _int), ("beta", _float), ("eps_p", _float), ("eps_r", _float)):
            object.__setattr__(self, name, _as_list(getattr(self, name), fn, name))
        if self.stride is not None:
            object.__setattr__(self, "stride", _int(self.stride))
        if self.fit_window is not None:
            object.__setattr__(self, "fit_window", _as_list(self.fit_window, _float, "fit_window"))
        if self.r_max != "auto":
            try:
                object.__setattr__(self, "r_max", _float(self.r_max))
            except (TypeError, ValueError):
                raise ConfigError(f"must be a positive number or 'auto', got {self.r_max!r}", "r_max") from None
        self._validate()

    def _validate(self):
        def need(cond, msg, name):
            if not cond:
                raise ConfigError(msg, name)

        need(self.algorithm in ALGORITHMS, f"must be one of {ALGORITHMS}", "algorithm")
        need(self.mode in MODES, f"must be one of {MODES}", "mode")
        need(self.update_mode in UPDATE_MODES, f"must be one of {UPDATE_MODES}", "update_mode")
        need(self.reference in REFERENCES, f"must be one of {REFERENCES}", "reference")
        need(self.n_states >= 2, "must be at least 2", "n_states")
        need(self.n_actions >= 1, "must be at least 1", "n_actions")
        need(1 <= self.d < self.n_states, "must satisfy 1 <= d < n_states", "d")
        need(self.T >= 1, "must be at least 1", "T")
        need(self.n_runs >= 1, "must be at least 1", "n_runs")
        need(0.0 <= self.gamma < 1.0, "must lie in [0, 1)", "gamma")
        need(self.mixing_horizon >= 10, "must be at least 10", "mixing_horizon")
        for k, n in enumerate(self.n_agents):
            need(n >= 1, "must be at least 1", f"n_agents[{k}]")
        for k, b in enumerate(self.beta):
            need(0.0 < b <= 1.0, "must lie in (0, 1]", f"beta[{k}]")
        for k, e in enumerate(self.eps_p):
            need(0.0 <= e < 1.0, "must lie in [0, 1)", f"eps_p[{k}]")
        for k, e in enumerate(self.eps_r):
            need(e >= 0.0 and math.isfinite(e), "must be finite and nonnegative", f"eps_r[{k}]")
        if self.r_max != "auto":
            need(self.r_max > 0.0 and math.isfinite(self.r_max), "must be positive", "r_max")
        if self.stride is not None:
            need(self.stride >= 1, "must be at least 1", "stride")
        if self.fit_window is not None:
            need(len(self.fit_window) == 2, "must be [lo, hi]", "fit_window")
            lo, hi = self.fit_window
            need(0.0 < lo < hi <= self.T, "must satisfy 0 < lo < hi <= T", "fit_window")

    @property
    def resolved_stride(self) -> int:
        return self.stride if self.stride is not None else default_stride(self.T)

    @property
    def resolved_window(self) -> tuple[float, float]:
        return tuple(self.fit_window) if self.fit_window is not None else (self.T / 10.0, float(self.T))

    def r_max_for(self, eps_r: float) -> float:
        return auto_r_max(eps_r) if self.r_max == "auto" else float(self.r_max)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> ExperimentConfig:
        if not isinstance(obj, dict):
            raise ConfigError("config must be a mapping", "<root>")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError("unknown field", unknown[0])
        return cls(**obj)

    def with_overrides(self, overrides: dict) -> ExperimentConfig:
        obj = self.to_dict()
        for key, value in overrides.items():
            if key not in obj:
                raise ConfigError("unknown field", key)
            obj[key] = value
        return ExperimentConfig.from_dict(obj)

    def cells(self) -> list[Cell]:
        return [
            Cell(n, b, ep, er, self.r_max_for(er))
            for n, b, ep, er in itertools.product(self.n_agents, self.beta, self.eps_p, self.eps_r)
        ]


@dataclass(frozen=True)
class Cell:
    n_agents: int
    beta: float
    eps_p: float
    eps_r: float
    r_max: float

    @property
    def tag(self) -> str:
        return (f"N={self.n_agents}_beta={format_value(self.beta)}_eps_p={format_value(self.eps_p)}"
                f"_eps_r={format_value(self.eps_r)}")

    def to_dict(self) -> dict:
        return asdict(self)


def run_seed(master_seed: int, cell_tag: str, run_index: int) -> int:
    return derive_seed(master_seed, "run", cell_tag, run_index) & ((1 << 63) - 1)


@dataclass(eq=False)
class AggregateResult:
    t: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_runs: int
    n_diverged: int = 0
    mean_r: np.ndarray | None = None
    std_r: np.ndarray | None = None
    cell: Cell | None = None
    config_digest: str = ""
    info: dict = field(default_factory=dict)

    @property
    def terminal_mean(self) -> float:
        return float(self.mean[-1])

    @property
    def terminal_std(self) -> float:
        return float(self.std[-1])

    def at(self, t_eval: int) -> float:
        hits = np.flatnonzero(self.t == t_eval)
        if hits.size == 0:
            raise ConfigError(f"t={t_eval} is not a recorded iteration", "t_eval")
        return float(self.mean[hits[0]])


def _mean_std(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # shifting by the first run keeps identical runs exact (std == 0, mean == value)
    shift = stack[0]
    dev = stack - shift
    dev_mean = dev.mean(axis=0)
    std = np.sqrt(((dev - dev_mean) ** 2).mean(axis=0))
    return shift + dev_mean, std


def aggregate_runs(traces, cell: Cell | None = None, config_digest: str = "") -> AggregateResult:
    """Pointwise mean and population std over the non-diverged traces."""
    traces = list(traces)
    if not traces:
        raise AggregationError("no traces to aggregate")
    good = [tr for tr in traces if not tr.diverged]
    if not good:
        raise AggregationError(f"all {len(traces)} runs diverged")
    t = good[0].t
    for k, tr in enumerate(good):
        if tr.t.shape != t.shape or not np.array_equal(tr.t, t):
            raise AggregationError(f"trace {k} has a different length or stride")
    mean, std = _mean_std(np.stack([tr.err for tr in good]))
    mean_r = std_r = None
    if all(tr.err_r is not None for tr in good):
        mean_r, std_r = _mean_std(np.stack([tr.err_r for tr in good]))
    return AggregateResult(t.copy(), mean, std, len(good), len(traces) - len(good),
                           mean_r, std_r, cell, config_digest)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    window: tuple
    n_points: int

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "window": list(self.window), "n_points": self.n_points}


def fit_power_law(t, y, window) -> RateFit:
    """OLS of log y on log t over lo <= t <= hi."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lo, hi = float(window[0]), float(window[1])
    if not 0.0 < lo < hi:
        raise ConfigError(f"window must satisfy 0 < lo < hi, got {window}", "fit_window")
    keep = (t >= lo) & (t <= hi)
    if keep.sum() < 2:
        raise FitError(f"fewer than two points in window [{lo}, {hi}]", "rate_fit")
    ys = y[keep]
    if not np.all(ys > 0.0) or not np.all(np.isfinite(ys)):
        raise FitError("error values in the fit window must be positive and finite", "rate_fit")
    x, z = np.log(t[keep]), np.log(ys)
    slope, intercept = np.polyfit(x, z, 1)
    ss_res = float(((z - (intercept + slope * x)) ** 2).sum())
    ss_tot = float(((z - z.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return RateFit(float(slope), float(intercept), r2, (lo, hi), int(keep.sum()))


def fit_loglog_rate(aggregate: AggregateResult, window=None) -> RateFit:
    if window is None:
        window = (aggregate.t[-1] / 10.0, float(aggregate.t[-1]))
    return fit_power_law(aggregate.t, aggregate.mean, window)


def speedup_ratio(aggregates: dict, t_eval: int | None = None, expected_ns=None) -> dict:
    """``{N: N * mean_err_N(t_eval)}``; constant across N under linear speedup."""
    if not aggregates:
        raise ConfigError("no aggregates given", "aggregates")
    if expected_ns is not None:
        missing = sorted(set(expected_ns) - set(aggregates))
        if missing:
            raise ConfigError(f"missing aggregates for N={missing}", "n_agents")
    if t_eval is None:
        t_eval = int(min(int(a.t[-1]) for a in aggregates.values()))
    return {int(n): int(n) * agg.at(t_eval) for n, agg in sorted(aggregates.items())}


def _workers(workers: int | None) -> int:
    if workers is None:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigError(f"must be an integer, got {raw!r}", WORKERS_ENV) from None
    if workers < 1:
        raise ConfigError("must be at least 1", "workers")
    return workers


class FamilyCache:
    """Builds each cell's environment once; the family seed ignores N and the budget."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._policy = gen_policy(cfg.n_states, cfg.n_actions, cfg.env_seed)
        self._phi = gen_feature_matrix(cfg.n_states, cfg.d, True, cfg.env_seed)
        self._prepared: dict = {}

    def prepared(self, cell: Cell) -> PreparedFamily:
        key = (cell.n_agents, cell.eps_p, cell.eps_r, cell.r_max)
        if key not in self._prepared:
            cfg = self.cfg
            budget = HeterogeneityBudget(cell.eps_p, cell.eps_r, cell.r_max)
            fam = gen_agent_family(cfg.n_states, cfg.n_actions, cell.n_agents, budget,
                                   self._policy, self._phi, cfg.env_seed)
            self._prepared[key] = prepare_family(fam, gamma=cfg.gamma)
        return self._prepared[key]


def family_diagnostics(prepared: PreparedFamily, cell: Cell, horizon: int = 100) -> dict:
    fam = prepared.family
    eps_p_hat, eps_r_hat = verify_heterogeneity(fam)
    gaps = gap_constants(fam.budget, fam.n_states, cell.r_max, prepared.solutions)
    mixing = []
    for chain, sol in zip(fam.chains(), prepared.solutions):
        try:
            mixing.append(estimate_mixing(chain, horizon, sol.d_mu).to_dict())
        except Exception as exc:  # diagnostics only; never fail a run over them
            mixing.append({"error": str(exc)})
    return {
        "achieved_eps_p": eps_p_hat,
        "achieved_eps_r": eps_r_hat,
        "gap_constants": gaps.to_dict(),
        "mixing": mixing,
        "r_star_agent1": prepared.solutions[0].r_star,
        "lambda_min_sym_global": prepared.global_solution.lambda_min_sym,
    }


def run_cell(cfg: ExperimentConfig, cell: Cell, prepared: PreparedFamily,
             workers: int | None = None, backend: str | None = None) -> list[RunTrace]:
    schedule = StepSchedule(cell.beta)
    stride = cfg.resolved_stride

    def one(k: int) -> RunTrace:
        return run_fedtd(cfg.algorithm, prepared, schedule, cfg.T, cfg.mode,
                         run_seed(cfg.master_seed, cell.tag, k), cfg.update_mode,
                         reference=cfg.reference, stride=stride, backend=backend)

    n = _workers(workers)
    if n == 1:
        return [one(k) for k in range(cfg.n_runs)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, range(cfg.n_runs)))


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, backend: str | None = None,
                   diagnostics: bool = True, keep_traces: bool = False) -> list[AggregateResult]:
    cache = FamilyCache(cfg)
    cfg_digest = digest(cfg.to_dict())
    results = []
    for cell in cfg.cells():
        prepared = cache.prepared(cell)
        traces = run_cell(cfg, cell, prepared, workers, backend)
        n_div = sum(tr.diverged for tr in traces)
        if n_div > MAX_DIVERGED_FRACTION * len(traces):
            raise DivergenceError(f"cell {cell.tag}: {n_div} of {len(traces)} runs diverged")
        agg = aggregate_runs(traces, cell, cfg_digest)
        if diagnostics:
            agg.info.update(family_diagnostics(prepared, cell, cfg.mixing_horizon))
        if keep_traces:
            agg.info["traces"] = traces
        results.append(agg)
    return results


def speedup_tables(aggregates) -> list[dict]:
    """Group cells that differ only in N and tabulate N * terminal error."""
    groups: dict = {}
    for agg in aggregates:
        c = agg.cell
        groups.setdefault((c.beta, c.eps_p, c.eps_r, c.r_max), {})[c.n_agents] = agg
    out = []
    for (beta, eps_p, eps_r, r_max), by_n in groups.items():
        if len(by_n) < 2:
            continue
        table = speedup_ratio(by_n)
        vals = list(table.values())
        out.append({"beta": beta, "eps_p": eps_p, "eps_r": eps_r, "r_max": r_max,
                    "table": {str(n): v for n, v in table.items()},
                    "max_over_min": max(vals) / min(vals) if min(vals) > 0 else math.inf})
    return out


def export(aggregates, rate_fits, out_dir, config=None, extra=None, comment=None) -> dict:
    """Write one CSV per cell plus ``summary.json``; returns the summary.

    ``comment`` (one line) is written as a leading ``#`` line of every CSV.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    aggregates = list(aggregates)
    rate_fits = list(rate_fits) if rate_fits is not None else [None] * len(aggregates)
    cells = []
    for agg, fit in zip(aggregates, rate_fits):
        tag = agg.cell.tag if agg.cell is not None else f"cell{len(cells)}"
        name = f"{tag}.csv"
        cols = ["t", "mean", "std"]
        series = [agg.t, agg.mean, agg.std]
        if agg.mean_r is not None:
            cols += ["mean_r", "std_r"]
            series += [agg.mean_r, agg.std_r]
        with open(out / name, "w", newline="") as fh:
            write_csv(fh, cols, zip(*(s.tolist() for s in series)), comment=comment)
        info = {k: v for k, v in agg.info.items() if k != "traces"}
        cells.append({
            "tag": tag,
            "csv": name,
            "cell": agg.cell.to_dict() if agg.cell is not None else None,
            "n_runs": agg.n_runs,
            "n_diverged": agg.n_diverged,
            "terminal_mean": agg.terminal_mean,
            "terminal_std": agg.terminal_std,
            "rate_fit": fit.to_dict() if fit is not None else None,
            **info,
        })
    summary = {
        "config": config,
        "config_digest": digest(config) if config is not None else None,
        "cells": cells,
        "speedup": speedup_tables([a for a in aggregates if a.cell is not None]),
    }
    if extra:
        summary.update(extra)
    write_json(out / "summary.json", summary)
    return summary


def run_and_export(cfg: ExperimentConfig, out_dir, workers=None, backend=None) -> dict:
    aggs = run_experiment(cfg, workers, backend)
    fits = []
    for agg in aggs:
        try:
            fits.append(fit_loglog_rate(agg, cfg.resolved_window))
        except FitError:
            fits.append(None)
    return export(aggs, fits, out_dir, cfg.to_dict())

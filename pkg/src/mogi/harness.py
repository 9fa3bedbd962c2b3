"""Config-driven experiment runner behind the command-line interface.

Each run reads one JSON config, derives one seed per replication from
``(seed, n, m, rep)`` and writes CSV/JSON artifacts plus a manifest. The
same config and seed always produce byte-identical files.
"""

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .estimation import BURN_IN, fit_mgi_baseline, fit_wlse
from .exceptions import DomainError, NumericError, SimulationFault
from .factor import (
    FactorMOGI,
    default_r_max,
    estimate_loadings,
    poet_estimate,
    poet_idiosyncratic,
    predict_large,
    project_factor,
    relative_frobenius,
    select_rank,
    simulation_threshold,
    single_day_threshold,
    subspace_cosines,
)
from .model import ConditionalMoments, forecast_next, project_psd, true_garch_params
from .params import bivariate_design, factor_design_params, trivariate_design
from .portfolio import GRID_INTERVALS, daily_portfolio_squares, min_variance_l1, TRADING_DAYS
from .realized import RealizedSeries, realize
from .simulate import (
    FactorDesign,
    export_panels,
    load_panels,
    simulate_factor_mogi,
    simulate_mogi,
    structural_from_dict,
)

log = logging.getLogger(__name__)

MODES = ("simulate", "estimate", "forecast", "backtest", "replicate")
STUDIES = ("lowdim", "factor")
DESIGNS = {"trivariate": trivariate_design, "bivariate": bivariate_design}
PARAM_BLOCKS = ("omega_high", "omega_low", "gamma_high", "gamma_low", "beta_high", "beta_low", "mu")
NORMS = ("spectral", "frobenius", "max")
FORECAST_NORMS = NORMS + ("relative_frobenius",)
SEED_ENV = "MOGI_SEED"
METRIC_FIELDS = ("study", "n", "m", "rep", "seed", "kind", "block", "norm", "value")


class ConfigError(DomainError):
    """The experiment config is invalid; ``problems`` lists each field issue."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


class ExperimentError(RuntimeError):
    """A replication failed; the message names the setting, rep and seed."""


@dataclass
class ExperimentConfig:
    """All inputs of one run.

    ``grid`` lists ``[n, m]`` settings for ``replicate``; when empty the single
    setting ``(n, m)`` is used. ``oos_days`` is the number of days after the
    estimation window used for forecast and backtest evaluation.
    """

    mode: str = "replicate"
    study: str = "lowdim"
    design: str = "trivariate"
    params_path: str = None
    data_path: str = None
    p: int = 50
    r: int = 3
    n: int = 250
    m: int = 780
    tau: float = None
    grid: list = field(default_factory=list)
    reps: int = 1
    seed: int = 0
    weight: str = "min"
    window: int = None
    truncate: bool = False
    n_starts: int = 6
    burn_in: int = BURN_IN
    fit_mgi: bool = True
    rank: int = None
    r_max: int = None
    threshold: float = None
    rule: str = "soft"
    c0_grid: list = field(default_factory=lambda: [1.0, 1.5, 2.0, 2.5, 3.0])
    oos_days: int = 25
    out: str = "out"
    threads: int = 1

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown field {k!r}" for k in unknown])
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file {path} not found"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
        if not isinstance(d, dict):
            raise ConfigError(["config must be a JSON object"])
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)

    def settings(self):
        return [tuple(int(v) for v in s) for s in self.grid] if self.grid else [(self.n, self.m)]

    def config_hash(self):
        """SHA-256 of the canonical JSON of every field except the output directory."""
        d = self.to_dict()
        d.pop("out")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def validate(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.study not in STUDIES:
            problems.append(f"study: expected one of {STUDIES}, got {self.study!r}")
        if self.study == "lowdim" and self.params_path is None and self.design not in DESIGNS:
            problems.append(f"design: expected one of {tuple(DESIGNS)}, got {self.design!r}")
        if self.mode == "backtest" and self.study != "factor":
            problems.append("study: backtest runs on the factor study")
        if self.mode == "estimate":
            if not self.data_path:
                problems.append("data_path: required for estimate")
            elif not Path(self.data_path).exists():
                problems.append(f"data_path: {self.data_path} does not exist")
        if self.params_path is not None and not Path(self.params_path).is_file():
            problems.append(f"params_path: {self.params_path} is not a file")
        for name in ("reps", "n", "m", "p", "r", "threads", "n_starts"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                problems.append(f"{name}: must be a positive integer, got {value!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            problems.append(f"seed: must be an unsigned 64-bit integer, got {self.seed!r}")
        if not isinstance(self.burn_in, int) or self.burn_in < 0:
            problems.append(f"burn_in: must be a non-negative integer, got {self.burn_in!r}")
        if not isinstance(self.oos_days, int) or self.oos_days < 0:
            problems.append(f"oos_days: must be a non-negative integer, got {self.oos_days!r}")
        if self.mode in ("forecast", "backtest") and self.oos_days < 1:
            problems.append(f"oos_days: {self.mode} needs at least one evaluation day")
        if self.tau is not None and not 0 < self.tau < 1:
            problems.append(f"tau: must lie in (0, 1), got {self.tau}")
        bad_grid = [s for s in self.grid
                    if not (isinstance(s, (list, tuple)) and len(s) == 2
                            and all(isinstance(v, int) and v > 0 for v in s))]
        problems.extend(f"grid: each entry must be [n, m] with positive integers, got {s!r}" for s in bad_grid)
        sizes_ok = (not bad_grid and all(isinstance(v, int) and v > 0 for v in (self.n, self.m))
                    and isinstance(self.burn_in, int) and self.burn_in >= 0)
        for n, m in (self.settings() if sizes_ok else []):
            if n <= self.burn_in + 2:
                problems.append(f"n: {n} leaves no days after the {self.burn_in}-day burn-in")
            if self.window is not None and not 2 <= self.window <= m:
                problems.append(f"window: must lie in [2, m={m}], got {self.window}")
            if self.mode == "backtest" and m % GRID_INTERVALS:
                problems.append(f"m: backtest needs a multiple of {GRID_INTERVALS}, got {m}")
        if self.weight not in ("min", "max"):
            problems.append(f"weight: expected 'min' or 'max', got {self.weight!r}")
        if self.rule not in ("soft", "hard"):
            problems.append(f"rule: expected 'soft' or 'hard', got {self.rule!r}")
        if self.threshold is not None and self.threshold < 0:
            problems.append("threshold: must be non-negative")
        if not self.c0_grid or any(c < 1 for c in self.c0_grid):
            problems.append("c0_grid: needs at least one value, all >= 1")
        if self.r_max is not None and (not isinstance(self.r_max, int) or not 2 <= self.r_max <= self.p):
            problems.append(f"r_max: must be an integer in [2, p], got {self.r_max!r}")
        if self.study == "factor" and self.r > self.p:
            problems.append("r: cannot exceed p")
        if problems:
            raise ConfigError(problems)
        return self


def rep_seed(base, n, m, rep):
    """Counter-based replication seed, independent of the rest of the grid."""
    state = np.random.SeedSequence([int(base), int(n), int(m), int(rep)]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def matrix_errors(estimate, truth, norms=NORMS):
    D = np.atleast_2d(np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float))
    if D.shape[0] == 1:
        D = D.T
    out = {}
    for norm in norms:
        if norm == "spectral":
            out[norm] = float(np.linalg.norm(D, 2))
        elif norm == "frobenius":
            out[norm] = float(np.linalg.norm(D, "fro"))
        elif norm == "max":
            out[norm] = float(np.abs(D).max())
        elif norm == "relative_frobenius":
            out[norm] = relative_frobenius(D, truth)
        else:
            raise DomainError(f"unknown norm {norm!r}")
    return out


def _structural(config):
    if config.params_path is not None:
        params = structural_from_dict(json.loads(Path(config.params_path).read_text()))
    elif config.study == "factor":
        params = factor_design_params()
    else:
        params = DESIGNS[config.design]()
    if config.tau is not None:
        params = params.replace(tau=config.tau)
    return params


def _factor_design(config):
    design = FactorDesign.default(config.p, _structural(config))
    if design.r != config.r:
        raise ConfigError([f"r: the factor design has {design.r} factors, config says {config.r}"])
    return design


def _realize(config, panels, tau):
    return realize(panels, tau, w=config.window, g=config.weight, truncate=config.truncate)


def _rows(config, n, m, rep, seed, kind, block, errors):
    return [dict(study=config.study, n=n, m=m, rep=rep, seed=seed, kind=kind, block=block,
                 norm=norm, value=value) for norm, value in errors.items()]


def _naive_forecast(history: RealizedSeries):
    r = history.overnight[-1]
    return history.rv[-1] + np.outer(r, r)


def align_columns(estimate, truth):
    """Permute and flip estimated loading columns to best match the true ones.

    Columns are matched greedily by absolute inner product. Only used to
    report per-column errors in simulations, where the truth is known.
    """
    E = np.asarray(estimate, dtype=float)
    T = np.asarray(truth, dtype=float)
    score = np.abs(T.T @ E)
    order = np.full(T.shape[1], -1)
    for _ in range(T.shape[1]):
        i, j = np.unravel_index(np.argmax(score), score.shape)
        order[i] = j
        score[i, :] = -np.inf
        score[:, j] = -np.inf
    out = E[:, order]
    return out * np.sign(np.sum(out * T, axis=0) + (np.sum(out * T, axis=0) == 0))


# --- one replication per study --------------------------------------------

def lowdim_rep(config, params, n, m, rep, seed):
    """Fit, parameter errors and OOS forecast errors for one simulated sample."""
    theta0 = true_garch_params(params)
    oos = config.oos_days
    sim = simulate_mogi(params, n + oos, m, seed)
    series = _realize(config, sim.panels, params.tau)
    fit = fit_wlse(series.slice(0, n), burn_in=config.burn_in, n_starts=config.n_starts, seed=seed)
    rows = []
    for block in PARAM_BLOCKS:
        errors = matrix_errors(getattr(fit.theta, block), getattr(theta0, block))
        rows += _rows(config, n, m, rep, seed, "param", block, errors)
    if oos:
        rows += _lowdim_forecast_rows(config, params, fit, sim, series, n, m, rep, seed)
    return rows


def _lowdim_forecast_rows(config, params, fit, sim, series, n, m, rep, seed):
    moments = ConditionalMoments(params)
    mgi = fit_mgi_baseline(series.slice(0, n), burn_in=config.burn_in) if config.fit_mgi else None
    totals = {}
    for k in range(config.oos_days):
        history = series.slice(0, n + k)
        truth = moments.day_integral(sim.panels[n + k - 1].sigma_end)
        forecasts = {"MOGI": forecast_next(fit.theta, history), "PRVM": _naive_forecast(history)}
        if mgi is not None:
            forecasts["MGI"] = mgi.forecast(history)
        for method, F in forecasts.items():
            for norm, value in matrix_errors(F, truth, FORECAST_NORMS).items():
                totals[method, norm] = totals.get((method, norm), 0.0) + value
    return [dict(study=config.study, n=n, m=m, rep=rep, seed=seed, kind="forecast", block=method,
                 norm=norm, value=total / config.oos_days)
            for (method, norm), total in sorted(totals.items())]


def factor_rep(config, design, n, m, rep, seed):
    """Rank, loadings, factor parameters, sparse part and large forecasts for one sample."""
    p, tau = design.p, design.factor_params.tau
    oos = config.oos_days
    sim = simulate_factor_mogi(design, n + oos, m, seed)
    series = _realize(config, sim.panels, tau)
    train = series.slice(0, n)
    rows = []
    r_hat = select_rank(train.rv, config.r_max or default_r_max(p), m)
    rows += _rows(config, n, m, rep, seed, "rank", "rank",
                  {"value": float(r_hat), "correct": float(r_hat == design.r)})
    r = config.rank or design.r
    U_hat = align_columns(estimate_loadings(train.rv, r), design.loadings) if r == design.r \
        else estimate_loadings(train.rv, r)
    cos = subspace_cosines(U_hat, design.loadings)
    rows += _rows(config, n, m, rep, seed, "loadings", "cosine", {"mean": float(cos.mean()),
                                                                 "min": float(cos.min())})
    factor = project_factor(series.rv, series.overnight, U_hat, tau, r)
    factor_series = factor.series()
    fit = fit_wlse(factor_series.slice(0, n), burn_in=config.burn_in, n_starts=config.n_starts, seed=seed)
    if r == design.r:
        theta0 = true_garch_params(design.factor_params)
        for block in PARAM_BLOCKS:
            errors = matrix_errors(getattr(fit.theta, block), getattr(theta0, block))
            rows += _rows(config, n, m, rep, seed, "param", block, errors)
    threshold = simulation_threshold(p, n) if config.threshold is None else config.threshold
    sparse = poet_idiosyncratic(train.rv, train.overnight, r, threshold, config.rule)
    rows += _rows(config, n, m, rep, seed, "sparse", "idiosyncratic",
                  matrix_errors(sparse.matrix, design.idiosyncratic))
    if oos:
        rows += _factor_forecast_rows(config, design, fit, sparse, U_hat, factor_series, series,
                                      sim, n, m, rep, seed)
    return rows


def _factor_forecast_rows(config, design, fit, sparse, U_hat, factor_series, series, sim,
                          n, m, rep, seed):
    moments = ConditionalMoments(design.factor_params)
    U = design.loadings
    mgi = fit_mgi_baseline(factor_series.slice(0, n), burn_in=config.burn_in) if config.fit_mgi else None
    day_threshold = single_day_threshold(design.p, m)
    totals = {}
    for k in range(config.oos_days):
        history = series.slice(0, n + k)
        factor_history = factor_series.slice(0, n + k)
        psi = moments.day_integral(sim.factor_panels[n + k - 1].sigma_end)
        truth = U @ psi @ U.T + design.idiosyncratic
        forecasts = {
            "MOGI": predict_large(U_hat, fit.theta, factor_history, sparse).psd,
            "PRVM": _naive_forecast(history),
            "POET": project_psd(poet_estimate(_naive_forecast(history), U_hat.shape[1], day_threshold,
                                              config.rule)),
        }
        if mgi is not None:
            forecasts["MGI"] = project_psd(U_hat @ mgi.forecast(factor_history, psd=False) @ U_hat.T
                                           + sparse.matrix)
        for method, F in forecasts.items():
            for norm, value in matrix_errors(F, truth, FORECAST_NORMS).items():
                totals[method, norm] = totals.get((method, norm), 0.0) + value
    return [dict(study=config.study, n=n, m=m, rep=rep, seed=seed, kind="forecast", block=method,
                 norm=norm, value=total / config.oos_days)
            for (method, norm), total in sorted(totals.items())]


def backtest_rep(config, design, n, m, rep, seed):
    """Out-of-sample minimum-variance risk of MOGI and static POET forecasts.

    MOGI is fitted once on the first ``n`` days and then filtered forward;
    POET-static is the thresholded factor estimate of the latest day's
    ``RV + r r'``. Day k's weights use days before k only.
    """
    tau = design.factor_params.tau
    sim = simulate_factor_mogi(design, n + config.oos_days, m, seed)
    series = _realize(config, sim.panels, tau)
    model = FactorMOGI(n_factors=config.rank, r_max=config.r_max, threshold=config.threshold,
                       rule=config.rule, m=m, burn_in=config.burn_in, n_starts=config.n_starts,
                       seed=seed).fit(series.slice(0, n))
    day_threshold = single_day_threshold(design.p, m)
    squares = {}
    day_rows = []
    previous = {}
    for k in range(config.oos_days):
        history = series.slice(0, n + k)
        panel = sim.panels[n + k]
        forecasts = {"MOGI": model.predict(history),
                     "POET": project_psd(poet_estimate(_naive_forecast(history), model.rank_,
                                                       day_threshold, config.rule))}
        for method, G in forecasts.items():
            for c0 in config.c0_grid:
                w = min_variance_l1(G, c0, day=n + k + 1).w
                sq = daily_portfolio_squares(w, panel.prices, panel.overnight_return)
                squares[method, c0] = squares.get((method, c0), 0.0) + sq
                prev = previous.get((method, c0))
                turnover = float(np.abs(w - prev).sum()) if prev is not None else 0.0
                previous[method, c0] = w
                day_rows.append(dict(rep=rep, seed=seed, method=method, c0=c0, day=n + k + 1,
                                     square=sq, gross=float(np.abs(w).sum()), turnover=turnover))
    summary = [dict(rep=rep, seed=seed, method=method, c0=c0,
                    risk=float(np.sqrt(TRADING_DAYS / config.oos_days * total)),
                    turnover=float(np.mean([d["turnover"] for d in day_rows
                                            if d["method"] == method and d["c0"] == c0][1:] or [0.0])))
               for (method, c0), total in sorted(squares.items())]
    return dict(summary=summary, days=day_rows)


# --- orchestration ---------------------------------------------------------

def _run_task(task):
    mode, config_dict, n, m, rep = task
    config = ExperimentConfig.from_dict(config_dict)
    seed = rep_seed(config.seed, n, m, rep)
    try:
        if mode == "backtest":
            return backtest_rep(config, _factor_design(config), n, m, rep, seed)
        if config.study == "factor":
            return factor_rep(config, _factor_design(config), n, m, rep, seed)
        return lowdim_rep(config, _structural(config), n, m, rep, seed)
    except (NumericError, SimulationFault, DomainError) as exc:
        day = getattr(exc, "day", None)
        where = f" on day {day}" if day is not None else ""
        raise ExperimentError(f"replication {rep} at n={n}, m={m} (seed {seed}){where}: {exc}") from exc


def run_replications(config, mode):
    """Run every (setting, rep) task, in parallel when ``threads > 1``, in a fixed order."""
    tasks = [(mode, config.to_dict(), n, m, rep) for n, m in config.settings() for rep in range(config.reps)]
    if config.threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(_run_task, tasks))
    return [_run_task(t) for t in tasks]


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def aggregate(rows):
    """Mean, standard deviation and count of metric rows per (n, m, kind, block, norm)."""
    groups = {}
    for row in rows:
        key = (row["study"], row["n"], row["m"], row["kind"], row["block"], row["norm"])
        groups.setdefault(key, []).append(row["value"])
    out = []
    for key in sorted(groups):
        v = np.asarray(groups[key])
        out.append(dict(zip(("study", "n", "m", "kind", "block", "norm"), key), mean=float(v.mean()),
                        std=float(v.std(ddof=1)) if v.size > 1 else 0.0, count=int(v.size)))
    return out


def comparison_table(means):
    """One row per (n, m, norm) with a column per forecasting method."""
    table = {}
    methods = set()
    for row in means:
        if row["kind"] != "forecast":
            continue
        methods.add(row["block"])
        table.setdefault((row["n"], row["m"], row["norm"]), {})[row["block"]] = row["mean"]
    order = [mth for mth in ("MOGI", "MGI", "PRVM", "POET") if mth in methods]
    out = []
    for (n, m, norm), vals in sorted(table.items()):
        row = dict(n=n, m=m, norm=norm, **{mth: vals.get(mth, "") for mth in order})
        row["BEKK"] = "unavailable"
        out.append(row)
    return out, ["n", "m", "norm"] + order + ["BEKK"]


def write_manifest(config, out, artifacts, extra=None):
    manifest = dict(version=__version__, mode=config.mode, study=config.study, seed=config.seed,
                    config_hash=config.config_hash(), config=config.to_dict(),
                    artifacts=sorted(artifacts))
    manifest["config"].pop("out")
    manifest["config"].pop("threads")
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _run_replicate(config, out):
    results = run_replications(config, "replicate" if config.mode == "replicate" else "forecast")
    rows = [row for rep_rows in results for row in rep_rows]
    if config.mode == "forecast":
        rows = [row for row in rows if row["kind"] == "forecast"]
    write_csv(out / "metrics.csv", rows, METRIC_FIELDS)
    means = aggregate(rows)
    write_csv(out / "means.csv", means, ("study", "n", "m", "kind", "block", "norm", "mean", "std", "count"))
    artifacts = ["metrics.csv", "means.csv"]
    table, columns = comparison_table(means)
    if table:
        write_csv(out / "forecast.csv", table, columns)
        artifacts.append("forecast.csv")
    return artifacts


def _run_backtest(config, out):
    results = run_replications(config, "backtest")
    summary = [row for res in results for row in res["summary"]]
    days = [row for res in results for row in res["days"]]
    n, m = config.settings()[0]
    for row in summary:
        row.update(n=n, m=m)
    for row in days:
        row.update(n=n, m=m)
    write_csv(out / "backtest.csv", summary, ("n", "m", "rep", "seed", "method", "c0", "risk", "turnover"))
    write_csv(out / "backtest_days.csv", days,
              ("n", "m", "rep", "seed", "method", "c0", "day", "square", "gross", "turnover"))
    table = {}
    for row in summary:
        table.setdefault(row["c0"], {}).setdefault(row["method"], []).append(row["risk"])
    means = []
    for c0 in sorted(table):
        mogi, poet = np.asarray(table[c0]["MOGI"]), np.asarray(table[c0]["POET"])
        means.append(dict(c0=c0, MOGI=float(mogi.mean()), POET=float(poet.mean()),
                          mogi_not_worse=float(np.mean(mogi <= poet))))
    write_csv(out / "means.csv", means, ("c0", "MOGI", "POET", "mogi_not_worse"))
    return ["backtest.csv", "backtest_days.csv", "means.csv"]


def _run_simulate(config, out):
    n, m = config.settings()[0]
    seed = rep_seed(config.seed, n, m, 0)
    if config.study == "factor":
        design = _factor_design(config)
        result = simulate_factor_mogi(design, n, m, seed)
        params = design.factor_params
    else:
        params = _structural(config)
        result = simulate_mogi(params, n, m, seed)
    export_panels(result, out / "panels", params)
    series = _realize(config, result.panels, result.tau)
    series.to_csv(out / "realized.csv")
    return ["panels", "realized.csv"]


def _load_series(config):
    path = Path(config.data_path)
    if path.is_dir():
        panels, manifest = load_panels(path)
        tau = config.tau if config.tau is not None else manifest["tau"]
        return _realize(config, panels, tau), panels[0].m
    if config.tau is None:
        raise ConfigError(["tau: required when data_path is a realized-series CSV"])
    return RealizedSeries.from_csv(path, config.tau), config.m


def _run_estimate(config, out):
    series, m = _load_series(config)
    artifacts = ["fit.json", "forecast.csv"]
    if config.study == "factor":
        model = FactorMOGI(n_factors=config.rank, r_max=config.r_max, threshold=config.threshold,
                           rule=config.rule, m=m, burn_in=config.burn_in, n_starts=config.n_starts,
                           seed=config.seed).fit(series)
        result = model.fit_result_.to_dict()
        result.update(rank=model.rank_, loadings=model.loadings_.tolist(),
                      idiosyncratic=model.sparse_.matrix.tolist())
        forecast = model.predict(series)
    else:
        fit = fit_wlse(series, burn_in=config.burn_in, n_starts=config.n_starts, seed=config.seed)
        result = fit.to_dict()
        forecast = forecast_next(fit.theta, series)
    (out / "fit.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    p = forecast.shape[0]
    rows = [dict(row=i + 1, **{f"col_{j + 1}": float(forecast[i, j]) for j in range(p)}) for i in range(p)]
    write_csv(out / "forecast.csv", rows, ["row"] + [f"col_{j + 1}" for j in range(p)])
    return artifacts


RUNNERS = {"simulate": _run_simulate, "estimate": _run_estimate, "forecast": _run_replicate,
           "backtest": _run_backtest, "replicate": _run_replicate}


def apply_seed_override(config):
    """Replace the seed with ``$MOGI_SEED`` when that variable is set."""
    value = os.environ.get(SEED_ENV)
    if value is None:
        return config
    try:
        config.seed = int(value)
    except ValueError:
        raise ConfigError([f"{SEED_ENV}: expected an integer, got {value!r}"]) from None
    return config


def run(config: ExperimentConfig):
    """Validate ``config``, run it and write artifacts; returns the output directory."""
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("running %s (%s) into %s", config.mode, config.study, out)
    artifacts = RUNNERS[config.mode](config, out)
    write_manifest(config, out, artifacts + ["manifest.json"])
    return out

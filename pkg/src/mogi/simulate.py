"""Synthetic price panels from the two-regime GARCH-Ito diffusion.

Each day k covers [k-1, k): the open period [k-1, k-1+tau] is observed on an
m-step grid with additive Gaussian noise, the overnight period only through
its end points. The spot volatility is advanced on a grid ``fine`` times
finer than the observation grid.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from ._validation import check_positive_int, check_square, check_symmetric
from .exceptions import DomainError, SimulationFault
from .kernels import vech
from .params import StructuralParams

log = logging.getLogger(__name__)

NOISE_STD = 0.001
FINE_FACTOR = 10
NIGHT_STEPS = 1000
PSD_TOL = 1e-10
MAX_RESAMPLES = 20


@dataclass
class DayPanel:
    """Observed data for one day plus oracle quantities.

    ``prices`` has shape (m + 1, p): row l is the log price at
    ``times[l] = k - 1 + l * tau / m``. Rows 0 and m are the exact open and
    close; interior rows carry microstructure noise. ``iv``, ``overnight_iv``
    and the ``sigma_*`` fields are simulator truth and never read by the
    estimators.
    """

    day: int
    times: np.ndarray
    prices: np.ndarray
    open_price: np.ndarray
    close_price: np.ndarray
    next_open: np.ndarray
    iv: np.ndarray = None
    overnight_iv: np.ndarray = None
    sigma_open: np.ndarray = None
    sigma_close: np.ndarray = None
    sigma_end: np.ndarray = None

    @property
    def m(self):
        return self.prices.shape[0] - 1

    @property
    def p(self):
        return self.prices.shape[1]

    @property
    def overnight_return(self):
        return self.next_open - self.close_price

    @property
    def day_iv(self):
        return self.iv + self.overnight_iv


@dataclass
class SimulationResult:
    panels: list
    tau: float
    seed: object
    meta: dict = field(default_factory=dict)
    sigma_end: np.ndarray = None

    @property
    def n(self):
        return len(self.panels)

    def oracle_stack(self, name):
        return np.stack([getattr(d, name) for d in self.panels])


@njit(cache=True)
def _chol_psd(S, L, tol):
    """Lower Cholesky factor of S written into L, tolerating tiny negative pivots.

    Returns False when a pivot falls below -tol * trace.
    """
    p = S.shape[0]
    tr = 0.0
    for i in range(p):
        tr += abs(S[i, i])
    floor = -tol * max(tr, 1e-300)
    for j in range(p):
        for i in range(p):
            L[i, j] = 0.0
        d = S[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if d < floor:
            return False
        if d <= 0.0:
            continue
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, p):
            s = S[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return True


@njit(cache=True)
def _sandwich(M, X, out, scale):
    """out += scale * M X M' for symmetric X."""
    p = M.shape[0]
    for i in range(p):
        for j in range(i + 1):
            acc = 0.0
            for a in range(p):
                mia = M[i, a]
                if mia == 0.0:
                    continue
                for b in range(p):
                    acc += mia * X[a, b] * M[j, b]
            out[i, j] += scale * acc
            if i != j:
                out[j, i] += scale * acc


@njit(cache=True)
def _simulate_day(sigma_start, x_start, tau, mu, om_h1, om_h2, om_l1, om_l2,
                  g_h, g_l, b_h, b_l, nu, rho, rho_perp, z_b, z_w, z_l, fine, m, tol):
    p = x_start.shape[0]
    n_h = fine * m
    dt = tau / n_h
    sq = np.sqrt(dt)
    x = x_start.copy()
    obs = np.empty((m + 1, p))
    obs[0] = x
    S0 = sigma_start.copy()
    quad_h = np.zeros((p, p))
    _sandwich(g_h, om_h1 + S0, quad_h, 1.0)
    lin_h = om_h2 + S0
    S = S0.copy()
    L = np.zeros((p, p))
    running = np.zeros((p, p))
    pred = np.zeros((p, p))
    fb = np.zeros((p, p))
    zt = np.zeros(p)
    nz = np.zeros(p)
    db = np.zeros(p)
    iv = np.zeros((p, p))
    for j in range(n_h):
        if not _chol_psd(S, L, tol):
            return obs, iv, S, S, x, iv, x, False
        for i in range(p):
            db[i] = sq * z_b[j, i]
        for i in range(p):
            acc = 0.0
            dz = 0.0
            for a in range(p):
                acc += L[i, a] * db[a]
                dz += rho[i, a] * db[a] + rho_perp[i, a] * sq * z_w[j, a]
            x[i] += mu[i] * dt + acc
            zt[i] += dz
        s = (j + 1) / n_h
        for i in range(p):
            acc = 0.0
            for a in range(p):
                acc += nu[i, a] * zt[a]
            nz[i] = acc
        w_z = (1.0 - s) / tau
        for i in range(p):
            for k in range(p):
                iv[i, k] += S[i, k] * dt
                pred[i, k] = running[i, k] + S[i, k] * dt
        # predictor for the trapezoid update of the running integral
        for i in range(p):
            for k in range(p):
                fb[i, k] = 0.0
        _sandwich(b_h, pred, fb, 1.0 / tau)
        for i in range(p):
            for k in range(p):
                base = S0[i, k] + s * s * quad_h[i, k] - s * lin_h[i, k] + w_z * nz[i] * nz[k]
                s_pred = base + fb[i, k]
                running[i, k] += 0.5 * (S[i, k] + s_pred) * dt
        for i in range(p):
            for k in range(p):
                fb[i, k] = 0.0
        _sandwich(b_h, running, fb, 1.0 / tau)
        for i in range(p):
            for k in range(p):
                S[i, k] = (S0[i, k] + s * s * quad_h[i, k] - s * lin_h[i, k]
                           + w_z * nz[i] * nz[k] + fb[i, k])
        if (j + 1) % fine == 0:
            obs[(j + 1) // fine] = x
    s_close = S.copy()
    x_close = x.copy()
    n_l = z_l.shape[0]
    dtl = (1.0 - tau) / n_l
    sql = np.sqrt(dtl)
    quad_l = np.zeros((p, p))
    _sandwich(g_l, om_l1 + s_close, quad_l, 1.0)
    lin_l = om_l2 + s_close
    r = np.zeros(p)
    br = np.zeros(p)
    ov = np.zeros((p, p))
    for j in range(n_l):
        if not _chol_psd(S, L, tol):
            return obs, iv, s_close, S, x, ov, x_close, False
        for i in range(p):
            acc = 0.0
            for a in range(p):
                acc += L[i, a] * z_l[j, a]
            inc = sql * acc
            x[i] += mu[i] * dtl + inc
            r[i] += inc
        for i in range(p):
            for k in range(p):
                ov[i, k] += S[i, k] * dtl
        s = (j + 1) / n_l
        for i in range(p):
            acc = 0.0
            for a in range(p):
                acc += b_l[i, a] * r[a]
            br[i] = acc
        for i in range(p):
            for k in range(p):
                S[i, k] = (s_close[i, k] + s * s * quad_l[i, k] - s * lin_l[i, k]
                           + br[i] * br[k] / (1.0 - tau))
    return obs, iv, s_close, S, x, ov, x_close, True


def _entropy(seed):
    if seed is None:
        raise DomainError("an explicit seed is required for reproducibility")
    if np.isscalar(seed):
        return [int(seed)]
    return [int(s) for s in seed]


def _day_rng(seed, stream, day, attempt):
    return np.random.default_rng(_entropy(seed) + [stream, day, attempt])


class _DayStepper:
    """Advances the diffusion one day at a time."""

    def __init__(self, params: StructuralParams, m, fine=FINE_FACTOR, night_steps=NIGHT_STEPS):
        self.params = params
        self.m = check_positive_int(m, "m")
        self.fine = check_positive_int(fine, "fine")
        if self.fine < FINE_FACTOR:
            raise DomainError(f"fine grid factor must be at least {FINE_FACTOR}")
        self.night_steps = check_positive_int(night_steps, "night_steps")
        P = params
        p = P.p
        # loading of the independent part of the second Brownian motion
        self.rho_perp = _psd_sqrt(np.eye(p) - P.rho @ P.rho.T)
        self._args = tuple(np.ascontiguousarray(a, dtype=float) for a in (
            P.mu, P.omega_h1, P.omega_h2, P.omega_l1, P.omega_l2,
            P.gamma_h, P.gamma_l, P.beta_h, P.beta_l, P.nu, P.rho, self.rho_perp))

    def step(self, sigma, x, seed, day):
        p = self.params.p
        n_h = self.fine * self.m
        for attempt in range(MAX_RESAMPLES):
            rng = _day_rng(seed, 0, day, attempt)
            z_b = rng.standard_normal((n_h, p))
            z_w = rng.standard_normal((n_h, p))
            z_l = rng.standard_normal((self.night_steps, p))
            mu, *rest = self._args
            out = _simulate_day(sigma, x, self.params.tau, mu, *rest, z_b, z_w, z_l,
                                self.fine, self.m, PSD_TOL)
            if out[-1]:
                return out[:-1], rng
            log.warning("spot volatility left the PSD cone on day %d, resampling (attempt %d)",
                        day, attempt + 1)
        raise SimulationFault(f"day {day} failed after {MAX_RESAMPLES} resamples", day=day)


def _psd_sqrt(M):
    lam, vecs = np.linalg.eigh(M)
    return (vecs * np.sqrt(np.clip(lam, 0.0, None))) @ vecs.T


def iter_mogi_days(params: StructuralParams, n, m, seed, noise_std=NOISE_STD,
                   fine=FINE_FACTOR, night_steps=NIGHT_STEPS):
    """Yield ``DayPanel`` objects one day at a time (constant memory)."""
    n = check_positive_int(n, "n")
    stepper = _DayStepper(params, m, fine, night_steps)
    tau = params.tau
    sigma = params.sigma0 if params.sigma0 is not None else _default_sigma0(params)
    sigma = check_symmetric(sigma, "sigma0", params.p)
    x = params.x0.copy()
    grid = np.arange(m + 1) * tau / m
    for k in range(1, n + 1):
        (obs, iv, s_close, s_end, x_end, ov, x_close), rng = stepper.step(sigma, x, seed, k)
        prices = obs.copy()
        if noise_std > 0 and m > 1:
            prices[1:m] += noise_std * rng.standard_normal((m - 1, params.p))
        yield DayPanel(
            day=k,
            times=k - 1 + grid,
            prices=prices,
            open_price=obs[0].copy(),
            close_price=x_close,
            next_open=x_end.copy(),
            iv=0.5 * (iv + iv.T),
            overnight_iv=0.5 * (ov + ov.T),
            sigma_open=sigma.copy(),
            sigma_close=s_close,
            sigma_end=s_end,
        )
        sigma, x = s_end, x_end


def _default_sigma0(params):
    from .model import derive_coefficients

    return derive_coefficients(params).day.intercept


def simulate_mogi(params: StructuralParams, n, m, seed, noise_std=NOISE_STD,
                  fine=FINE_FACTOR, night_steps=NIGHT_STEPS):
    """Simulate n days with m intraday increments each.

    Returns a :class:`SimulationResult` whose ``sigma_end`` is the spot
    volatility at the end of the last day (needed for the forecast oracle).
    """
    panels = list(iter_mogi_days(params, n, m, seed, noise_std, fine, night_steps))
    return SimulationResult(panels, params.tau, seed,
                            meta=dict(n=n, m=m, p=params.p, fine=fine, night_steps=night_steps,
                                      noise_std=noise_std),
                            sigma_end=panels[-1].sigma_end)


# --- factor designs ------------------------------------------------------

def build_U(p, r=3):
    """Loadings with columns sqrt(2) cos(2 pi i / p), 1, sqrt(2) sin(2 pi i / p)."""
    if r != 3:
        raise DomainError("the trigonometric loading design has exactly three columns")
    if p < r:
        raise DomainError("p must be at least r")
    i = np.arange(1, p + 1)
    ang = 2.0 * np.pi * i / p
    return np.column_stack([np.sqrt(2.0) * np.cos(ang), np.ones(p), np.sqrt(2.0) * np.sin(ang)])


def banded_idiosyncratic(p, diag=0.004, decay=0.5):
    """Gamma^s_ij = decay^|i-j| sqrt(Gamma_ii Gamma_jj) with a constant diagonal."""
    d = np.full(p, float(diag))
    lag = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    return decay ** lag * np.sqrt(np.outer(d, d))


@dataclass
class FactorDesign:
    loadings: np.ndarray
    idiosyncratic: np.ndarray
    factor_params: StructuralParams

    def __post_init__(self):
        self.loadings = np.asarray(self.loadings, dtype=float)
        p, r = self.loadings.shape
        if r != self.factor_params.p:
            raise DomainError("loading columns must match the factor dimension")
        gram = self.loadings.T @ self.loadings
        if np.abs(gram - p * np.eye(r)).max() > 1e-8 * p:
            raise DomainError("loadings must satisfy U'U = p I")
        self.idiosyncratic = check_symmetric(self.idiosyncratic, "idiosyncratic", p, rtol=1e-10)
        if p > 0 and np.abs(self.idiosyncratic).max() > 0:
            try:
                np.linalg.cholesky(self.idiosyncratic)
            except np.linalg.LinAlgError as exc:
                raise DomainError("idiosyncratic covariance must be positive definite") from exc

    @property
    def p(self):
        return self.loadings.shape[0]

    @property
    def r(self):
        return self.loadings.shape[1]

    @classmethod
    def default(cls, p, factor_params=None):
        from .params import factor_design_params

        return cls(build_U(p), banded_idiosyncratic(p), factor_params or factor_design_params())


@dataclass
class FactorDay:
    """One day of a factor simulation.

    ``panel`` holds the p-dimensional observations; ``factor`` is the
    underlying r-dimensional day with its oracle fields.
    """

    panel: DayPanel
    factor: DayPanel


def iter_factor_days(design: FactorDesign, n, m, seed, noise_std=NOISE_STD,
                     fine=FINE_FACTOR, night_steps=NIGHT_STEPS):
    """Yield ``FactorDay`` objects.

    Factor paths come from the r-dimensional diffusion. The idiosyncratic
    part is a driftless Brownian motion with daily covariance Gamma^s, so
    tau Gamma^s accrues over the open period and (1 - tau) Gamma^s overnight;
    it is simulated exactly on the observation grid.
    """
    U = design.loadings
    p = design.p
    tau = design.factor_params.tau
    chol = _psd_sqrt(design.idiosyncratic)
    u = np.zeros(p)
    for fday in iter_mogi_days(design.factor_params, n, m, seed, noise_std=0.0,
                               fine=fine, night_steps=night_steps):
        rng = _day_rng(seed, 1, fday.day, 0)
        steps = rng.standard_normal((m, p)) @ chol.T * np.sqrt(tau / m)
        idio = np.vstack([u, u + np.cumsum(steps, axis=0)])
        night = rng.standard_normal(p) @ chol.T * np.sqrt(1.0 - tau)
        x = fday.prices @ U.T + idio
        y = x.copy()
        if noise_std > 0 and m > 1:
            y[1:m] += noise_std * rng.standard_normal((m - 1, p))
        close = x[-1].copy()
        u = idio[-1] + night
        next_open = fday.next_open @ U.T + u
        panel = DayPanel(day=fday.day, times=fday.times, prices=y, open_price=x[0].copy(),
                         close_price=close, next_open=next_open)
        yield FactorDay(panel, fday)


def simulate_factor_mogi(design: FactorDesign, n, m, seed, noise_std=NOISE_STD,
                         fine=FINE_FACTOR, night_steps=NIGHT_STEPS):
    days = list(iter_factor_days(design, n, m, seed, noise_std, fine, night_steps))
    panels = [d.panel for d in days]
    fp = design.factor_params
    result = SimulationResult(panels, fp.tau, seed,
                              meta=dict(n=n, m=m, p=design.p, r=design.r, fine=fine,
                                        night_steps=night_steps, noise_std=noise_std))
    result.factor_panels = [d.factor for d in days]
    result.sigma_end = days[-1].factor.sigma_end
    return result


# --- export --------------------------------------------------------------

def export_panels(result: SimulationResult, out_dir, params=None):
    """Write one CSV per day, a manifest, and a separate oracle sidecar."""
    out = Path(out_dir)
    (out / "days").mkdir(parents=True, exist_ok=True)
    p = result.panels[0].p
    header = "time," + ",".join(f"asset_{i + 1}" for i in range(p))
    for d in result.panels:
        rows = np.column_stack([d.times, d.prices])
        # closing row of the overnight period: exact next open at time k
        rows = np.vstack([rows, np.concatenate([[float(d.day)], d.next_open])])
        np.savetxt(out / "days" / f"day_{d.day:05d}.csv", rows, delimiter=",", header=header,
                   comments="", fmt="%.12g")
    manifest = dict(n=result.n, m=result.panels[0].m, p=p, tau=result.tau,
                    seed=_entropy(result.seed), meta=result.meta)
    if params is not None:
        manifest["params"] = structural_to_dict(params)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    oracle = {}
    for name in ("iv", "overnight_iv", "sigma_open", "sigma_close", "sigma_end"):
        if getattr(result.panels[0], name) is not None:
            oracle[name] = result.oracle_stack(name).tolist()
    (out / "oracle.sidecar.json").write_text(json.dumps(oracle))
    return out


def load_panels(in_dir):
    """Read panels written by :func:`export_panels` (observable fields only)."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    panels = []
    files = sorted((src / "days").glob("day_*.csv"))
    if not files:
        raise DomainError(f"no day files under {src}")
    for f in files:
        rows = np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2)
        k = int(f.stem.split("_")[1])
        grid, last = rows[:-1], rows[-1]
        panels.append(DayPanel(day=k, times=grid[:, 0], prices=grid[:, 1:],
                               open_price=grid[0, 1:].copy(), close_price=grid[-1, 1:].copy(),
                               next_open=last[1:].copy()))
    return panels, manifest


def structural_to_dict(params: StructuralParams):
    d = {"tau": params.tau, "p": params.p}
    for name in ("omega_h1", "omega_h2", "omega_l1", "omega_l2", "nu"):
        d[name] = vech(getattr(params, name)).tolist()
    for name in ("gamma_h", "gamma_l", "beta_h", "beta_l", "rho"):
        d[name] = np.asarray(getattr(params, name)).tolist()
    d["mu"] = params.mu.tolist()
    d["x0"] = params.x0.tolist()
    if params.sigma0 is not None:
        d["sigma0"] = vech(params.sigma0).tolist()
    return d


def structural_from_dict(d):
    from .kernels import unvech

    kw = {"tau": d["tau"]}
    for name in ("omega_h1", "omega_h2", "omega_l1", "omega_l2", "nu"):
        kw[name] = unvech(np.asarray(d[name], dtype=float))
    for name in ("gamma_h", "gamma_l", "beta_h", "beta_l", "rho"):
        if name in d:
            M = np.asarray(d[name], dtype=float)
            kw[name] = check_square(M, name) if M.ndim == 2 else unvech(M, symmetric=False)
    for name in ("mu", "x0"):
        if name in d:
            kw[name] = np.asarray(d[name], dtype=float)
    if "sigma0" in d:
        kw["sigma0"] = unvech(np.asarray(d["sigma0"], dtype=float))
    return StructuralParams(**kw)

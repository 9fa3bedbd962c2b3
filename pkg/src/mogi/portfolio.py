"""Minimum-variance portfolios under a gross-exposure (L1) constraint,
and their out-of-sample risk.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator

from .exceptions import DomainError, NumericError

RIDGE = 1e-10
PSD_TOL = 1e-10
SUPPORT_TOL = 1e-10
STAGE_TOLS = (1e-7, 1e-10)
KKT_TOL = 1e-10
TRADING_DAYS = 252
GRID_INTERVALS = 39


@dataclass
class PortfolioWeights:
    w: np.ndarray
    c0: float
    objective: float
    kkt_residual: float
    iterations: int
    day: int = None
    method: str = "fista"

    @property
    def gross(self):
        return float(np.abs(self.w).sum())


# --- projection onto {1'w = 1, ||w||_1 <= c0} ------------------------------

@njit(cache=True)
def _soft_sum(y, shift, lam):
    total = 0.0
    for i in range(y.size):
        v = y[i] + shift
        if v > lam:
            total += v - lam
        elif v < -lam:
            total += v + lam
    return total


@njit(cache=True)
def _shift_for_sum(y, lam, target):
    """Exact shift s with sum_i soft(y_i + s, lam) = target (piecewise-linear root).

    The sum is nondecreasing in s with slope equal to the number of entries
    outside [-lam, lam]; sweeping the sorted breakpoints tracks that slope.
    """
    p = y.size
    bps = np.concatenate((-y - lam, -y + lam))
    # leaving the lower branch lowers the slope, entering the upper one raises it
    dslope = np.concatenate((-np.ones(p), np.ones(p)))
    order = np.argsort(bps)
    val = _soft_sum(y, bps[order[0]], lam)
    if target <= val:
        return (target - y.sum() - p * lam) / p
    slope = p + dslope[order[0]]
    prev = bps[order[0]]
    for k in range(1, 2 * p):
        b = bps[order[k]]
        nxt = val + slope * (b - prev)
        if nxt >= target:
            if slope <= 0.0:
                return b
            return prev + (target - val) / slope
        val = nxt
        prev = b
        slope += dslope[order[k]]
    return (target - y.sum() + p * lam) / p


@njit(cache=True)
def _soft(y, shift, lam):
    out = np.empty(y.size)
    for i in range(y.size):
        v = y[i] + shift
        if v > lam:
            out[i] = v - lam
        elif v < -lam:
            out[i] = v + lam
        else:
            out[i] = 0.0
    return out


@njit(cache=True)
def project_budget_l1(y, c0):
    """Euclidean projection onto {w : sum(w) = 1, ||w||_1 <= c0}."""
    w = y + (1.0 - y.sum()) / y.size
    if np.abs(w).sum() <= c0:
        return w
    lo = 0.0
    hi = max(np.abs(y).max(), 1.0)
    while np.abs(_soft(y, _shift_for_sum(y, hi, 1.0), hi)).sum() > c0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        w = _soft(y, _shift_for_sum(y, mid, 1.0), mid)
        if np.abs(w).sum() > c0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * max(1.0, hi):
            break
    return _soft(y, _shift_for_sum(y, hi, 1.0), hi)


@njit(cache=True)
def _fista(G, c0, w0, step, max_iter, tol):
    w = project_budget_l1(w0, c0)
    z = w.copy()
    t = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 * (G @ z)
        w_new = project_budget_l1(z - step * grad, c0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        diff = w_new - w
        z = w_new + ((t - 1.0) / t_new) * diff
        # restart momentum when the objective goes up
        if w_new @ (G @ w_new) > w @ (G @ w):
            z = w_new.copy()
            t_new = 1.0
        w = w_new
        t = t_new
        # a zero step can come from momentum; stop only at a projected-gradient fixed point
        if np.abs(diff).max() < tol:
            fixed = project_budget_l1(w - step * 2.0 * (G @ w), c0)
            if np.abs(fixed - w).max() < tol:
                break
    return w, it


# --- optimality checks ---------------------------------------------------

def _multipliers(G, w, c0):
    """Least-squares budget and L1 multipliers from stationarity on the support."""
    grad = 2.0 * G @ w
    support = np.abs(w) > SUPPORT_TOL
    gross_active = abs(np.abs(w).sum() - c0) <= 1e-9 * max(c0, 1.0)
    s = np.sign(w[support])
    if gross_active and np.all(s == s[0]):
        # budget and gross constraints coincide on the support; only nu + lam s0 is
        # pinned down, so take the smallest lam that clears the off-support conditions
        g_bar = grad[support].mean()
        off = s[0] * (grad[~support] - g_bar)
        lam = max(0.0, off.max(initial=0.0) / 2.0)
        return grad, support, -g_bar - lam * s[0], lam
    if gross_active:
        M = np.column_stack([np.ones(support.sum()), s])
    else:
        M = np.ones((support.sum(), 1))
    coef = np.linalg.lstsq(M, -grad[support], rcond=None)[0]
    nu = coef[0]
    lam = coef[1] if gross_active else 0.0
    return grad, support, nu, lam


def kkt_residual(G, w, c0):
    """Largest violation of the optimality conditions, relative to the mean variance."""
    G = np.asarray(G, dtype=float)
    scale = max(float(np.mean(np.diag(G))), 1e-300)
    grad, support, nu, lam = _multipliers(G, w, c0)
    s = np.sign(w)
    station_on = grad[support] + nu + lam * s[support]
    station_off = np.maximum(np.abs(grad[~support] + nu) - lam, 0.0)
    parts = [
        np.abs(station_on).max(initial=0.0) / scale,
        station_off.max(initial=0.0) / scale,
        max(-lam, 0.0) / scale,
        abs(w.sum() - 1.0),
        max(np.abs(w).sum() - c0, 0.0),
    ]
    return float(max(parts))


def _solve_pattern(G, signs, c0, gross_active):
    """Minimizer of w'Gw on a fixed sign pattern with the budget (and gross) equalities."""
    idx = np.flatnonzero(signs)
    k = idx.size
    if k == 0:
        return None
    s = signs[idx].astype(float)
    rows = [np.ones(k)] + ([s] if gross_active else [])
    C = np.array(rows)
    rhs = np.array([1.0] + ([c0] if gross_active else []))
    ncon = C.shape[0]
    K = np.zeros((k + ncon, k + ncon))
    K[:k, :k] = 2.0 * G[np.ix_(idx, idx)]
    K[:k, k:] = C.T
    K[k:, :k] = C
    b = np.concatenate([np.zeros(k), rhs])
    sol = np.linalg.lstsq(K, b, rcond=None)[0]
    if np.abs(K @ sol - b).max() > 1e-9 * max(1.0, np.abs(b).max()):
        return None
    w = np.zeros(G.shape[0])
    w[idx] = sol[:k]
    return w


def _polish(G, w, c0):
    """Re-solve on the detected support and signs; keep it only if it is better and feasible."""
    signs = np.where(np.abs(w) > SUPPORT_TOL, np.sign(w), 0.0)
    gross_active = np.abs(w).sum() >= c0 - 1e-7 * max(c0, 1.0)
    cand = _solve_pattern(G, signs, c0, gross_active)
    if cand is None:
        return w
    ok_signs = np.all(np.sign(cand[signs != 0]) == signs[signs != 0])
    feasible = np.abs(cand).sum() <= c0 + 1e-10 and abs(cand.sum() - 1.0) <= 1e-12
    if ok_signs and feasible and cand @ G @ cand <= w @ G @ w + 1e-15 * abs(w @ G @ w):
        return cand
    return w


def _check_inputs(G, c0):
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise DomainError("covariance must be square")
    if not np.allclose(G, G.T, rtol=1e-10, atol=1e-14 * max(np.abs(G).max(), 1e-300)):
        raise DomainError("covariance must be symmetric")
    G = 0.5 * (G + G.T)
    lam = np.linalg.eigvalsh(G)
    if lam[0] < -PSD_TOL * max(lam[-1], 1e-300):
        raise DomainError("covariance must be positive semi-definite")
    if not c0 >= 1.0:
        raise DomainError("c0 < 1 makes the budget constraint infeasible")
    return G, lam[-1]


def min_variance_l1(G, c0, max_iter=20000, tol=1e-13, day=None):
    """argmin w'Gw subject to sum(w) = 1 and ||w||_1 <= c0.

    Accelerated projected gradient, followed by an exact solve on the
    recovered support and sign pattern. A ridge of 1e-10 times the mean
    variance picks the minimum-norm optimum when G is singular.
    """
    G, top = _check_inputs(G, c0)
    p = G.shape[0]
    scale = max(float(np.mean(np.diag(G))), 1e-300)
    Gn = G / scale + RIDGE * np.eye(p)
    step = 1.0 / (2.0 * max(top / scale, 1e-12) + 2.0 * RIDGE)
    w = np.full(p, 1.0 / p)
    total = 0
    # a loose pass usually finds the support; the exact solve on it then satisfies KKT
    for stage_tol in sorted({max(t, tol) for t in STAGE_TOLS} | {tol}, reverse=True):
        w, it = _fista(Gn, float(c0), w, step, int(max_iter), stage_tol)
        total += it
        w = _polish(Gn, w, c0)
        residual = kkt_residual(Gn, w, c0)
        if residual <= KKT_TOL:
            break
    return PortfolioWeights(w, float(c0), float(w @ G @ w), residual, int(total), day)


def min_variance_l1_exhaustive(G, c0):
    """Enumerate all sign patterns; for small p only (3^p patterns)."""
    G, _ = _check_inputs(G, c0)
    p = G.shape[0]
    if p > 6:
        raise DomainError("exhaustive search is limited to p <= 6")
    Gr = G + RIDGE * max(float(np.mean(np.diag(G))), 1e-300) * np.eye(p)
    best, best_val = None, np.inf
    for pattern in itertools.product((-1, 0, 1), repeat=p):
        signs = np.array(pattern, dtype=float)
        for gross_active in (False, True):
            w = _solve_pattern(Gr, signs, c0, gross_active)
            if w is None:
                continue
            nz = signs != 0
            if not np.all(np.sign(w[nz]) * signs[nz] >= 0):
                continue
            if np.abs(w).sum() > c0 + 1e-10:
                continue
            val = w @ Gr @ w
            if val < best_val - 1e-18:
                best, best_val = w, val
    if best is None:
        raise NumericError("no feasible pattern found")
    return PortfolioWeights(best, float(c0), float(best @ G @ best), kkt_residual(Gr, best, c0), 0,
                            method="exhaustive")


class MinVariancePortfolio(BaseEstimator):
    """``fit(covariance)`` stores the optimal weights in ``weights_``."""

    def __init__(self, c0=1.0, max_iter=20000, tol=1e-13):
        self.c0 = c0
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        self.result_ = min_variance_l1(X, self.c0, self.max_iter, self.tol)
        self.weights_ = self.result_.w
        return self

    def predict(self, X):
        """Portfolio variance of the fitted weights under covariance ``X``."""
        X = np.asarray(X, dtype=float)
        return float(self.weights_ @ X @ self.weights_)


# --- out-of-sample risk --------------------------------------------------

def grid_returns(prices, intervals=GRID_INTERVALS):
    """Increments of an (m + 1, p) log-price panel on an ``intervals``-step grid."""
    prices = np.asarray(prices, dtype=float)
    m = prices.shape[0] - 1
    if m < intervals or m % intervals != 0:
        raise DomainError(f"{m} intraday steps do not contain a {intervals}-interval grid")
    return np.diff(prices[:: m // intervals], axis=0)


def daily_portfolio_squares(w, prices, overnight, intervals=GRID_INTERVALS):
    """Sum of squared within-day grid returns plus the squared close-to-open return."""
    inc = grid_returns(prices, intervals) @ w
    return float(inc @ inc + (overnight @ w) ** 2)


def oos_risk(weights, panels, intervals=GRID_INTERVALS):
    """Annualized realized risk sqrt(252/d * sum_k daily squares).

    ``weights[k]`` must be formed before day ``panels[k]`` starts.
    """
    weights = np.asarray(weights, dtype=float)
    if len(panels) != weights.shape[0]:
        raise DomainError("one weight vector per day is required")
    if len(panels) == 0:
        raise DomainError("no days to evaluate")
    total = sum(daily_portfolio_squares(w, d.prices, d.overnight_return, intervals)
                for w, d in zip(weights, panels))
    return float(np.sqrt(TRADING_DAYS / len(panels) * total))

"""Two-stage weighted least squares for the overnight GARCH-Ito model.

Stage 1 fits each regime separately with identity weights. The stage-1
residual covariances, plus a ridge, give the weight matrices of the full
weighted fit. Positivity and stability constraints are handled by
parameterization and a smooth penalty, and the optimizer is L-BFGS with
gradients from an adjoint pass through the filter recursions.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from .exceptions import DomainError, NumericError
from .kernels import (SERIES_MAX_TERMS, SERIES_TOL, VecIndexMaps, _tril_indices, kron, spectral_norm, unvec,
                      varrho_series, vec, vech, vech_length, vech_positions)
from .model import COND_LIMIT, derive_coefficients, filter_volatility, project_psd, _recursion, _similar
from .params import GarchParams
from .realized import RealizedSeries

log = logging.getLogger(__name__)

BURN_IN = 10
SENTINEL = 1e8
PENALTY_START = 0.98
PENALTY_WEIGHT = 1e6
NORM_LIMIT = 0.9995
RIDGE_EXPONENT = -0.6
STAGE1_FTOL = 1e-8
LOADING_STEP = 1e-6
PERTURB_SCALE = 0.1
LOADINGS = ("gamma_high", "gamma_low", "beta_high", "beta_low")


@dataclass
class WeightMatrices:
    high: np.ndarray
    low: np.ndarray
    ridge_high: float
    ridge_low: float

    def __post_init__(self):
        for name in ("high", "low"):
            M = np.asarray(getattr(self, name), dtype=float)
            M = 0.5 * (M + M.T)
            if np.linalg.eigvalsh(M)[0] <= 0:
                raise DomainError(f"weight matrix {name} must be positive definite")
            setattr(self, name, M)
        self.inv_high = np.linalg.inv(self.high)
        self.inv_low = np.linalg.inv(self.low)
        self.inv_high = 0.5 * (self.inv_high + self.inv_high.T)
        self.inv_low = 0.5 * (self.inv_low + self.inv_low.T)

    @classmethod
    def identity(cls, p):
        q = vech_length(p)
        return cls(np.eye(q), np.eye(q), 0.0, 0.0)

    def scaled(self, factor):
        return WeightMatrices(self.high * factor, self.low * factor,
                              self.ridge_high * factor, self.ridge_low * factor)


@dataclass
class FitResult:
    theta: GarchParams
    loss: float
    converged: bool
    n_iter: int
    message: str = ""
    start_losses: list = field(default_factory=list)
    weights: WeightMatrices = None
    covariance: np.ndarray = None
    flags: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)

    def standard_errors(self):
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self):
        d = dict(theta=self.theta.to_dict(), loss=self.loss, converged=self.converged,
                 n_iter=self.n_iter, message=self.message, start_losses=list(self.start_losses),
                 flags=list(self.flags))
        se = self.standard_errors()
        if se is not None:
            d["standard_errors"] = se.tolist()
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


# --- loss ----------------------------------------------------------------

@njit(cache=True)
def _wlse_sums(cH, RH, AH, BH, cL, RL, AL, BL, rv, r, rows, cols, tau, h0, burn, WH, WL,
               use_high, use_low):
    """Weighted residual sums of squares for the two regimes, in vech space.

    Row k of ``rv`` / ``r`` is day k + 1; the open-period state for that
    day uses day k's innovations, the overnight state uses day k + 1's
    realized measure and night k's return. A regime switched off is not
    propagated and contributes zero.
    """
    n, q = rv.shape
    sa = 1.0 / tau
    sb = 1.0 / (1.0 - tau)
    hH = h0.copy()
    hL = h0.copy()
    nH = np.empty(q)
    nL = np.empty(q)
    oo_prev = np.zeros(q)
    oo = np.zeros(q)
    eH = np.zeros(q)
    eL = np.zeros(q)
    sH = 0.0
    sL = 0.0
    for k in range(n):
        if k > 0:
            for i in range(q):
                aH = cH[i]
                aL = cL[i]
                for j in range(q):
                    if use_high:
                        aH += RH[i, j] * hH[j] + sa * AH[i, j] * rv[k - 1, j] + sb * BH[i, j] * oo_prev[j]
                    if use_low:
                        aL += RL[i, j] * hL[j] + sa * AL[i, j] * rv[k, j] + sb * BL[i, j] * oo_prev[j]
                nH[i] = aH
                nL[i] = aL
            for i in range(q):
                hH[i] = nH[i]
                hL[i] = nL[i]
        for a in range(q):
            oo[a] = r[k, rows[a]] * r[k, cols[a]]
        if k >= burn:
            for a in range(q):
                eH[a] = rv[k, a] - tau * hH[a]
                eL[a] = oo[a] - (1.0 - tau) * hL[a]
            for a in range(q):
                for b in range(q):
                    if use_high:
                        sH += eH[a] * WH[a, b] * eH[b]
                    if use_low:
                        sL += eL[a] * WL[a, b] * eL[b]
        for a in range(q):
            oo_prev[a] = oo[a]
    return sH, sL


class _Data:
    """Sample arrays laid out for the loss kernel."""

    def __init__(self, series: RealizedSeries, burn_in=BURN_IN):
        if series.n < burn_in + 1:
            raise DomainError(f"need more than {burn_in} days, got {series.n}")
        self.series = series
        self.n, self.p, self.tau = series.n, series.p, series.tau
        self.burn = burn_in
        self.n_eff = series.n - burn_in
        self.rv = np.ascontiguousarray(vech(series.rv))
        self.h0 = self.rv[0] / self.tau
        self.pos = vech_positions(self.p)
        self.rows, self.cols = (np.ascontiguousarray(a, dtype=np.int64) for a in _tril_indices(self.p))
        self.dup = VecIndexMaps(self.p).duplication

    def reduce(self, M):
        """vech-space version of a vec-space operator that preserves symmetry."""
        return np.ascontiguousarray(M[self.pos] @ self.dup)


def _sums(theta: GarchParams, data: _Data, weights: WeightMatrices, regimes=("high", "low")):
    coefs = derive_coefficients(theta, data.tau)
    hi, lo = coefs.high, coefs.low
    r = np.ascontiguousarray(data.series.returns(theta.mu))
    red = data.reduce
    return _wlse_sums(vech(hi.intercept), red(hi.R), red(hi.A), red(hi.B),
                      vech(lo.intercept), red(lo.R), red(lo.A), red(lo.B),
                      data.rv, r, data.rows, data.cols, data.tau, data.h0, data.burn,
                      weights.inv_high, weights.inv_low, "high" in regimes, "low" in regimes)


def loss_wlse(theta: GarchParams, data: RealizedSeries, weights: WeightMatrices = None,
              burn_in=BURN_IN):
    """Weighted square loss averaged over the post burn-in days."""
    d = _Data(data, burn_in)
    weights = weights or WeightMatrices.identity(data.p)
    s_h, s_l = _sums(theta, d, weights)
    return (s_h + s_l) / (2.0 * d.n_eff)


def regime_residuals(theta: GarchParams, data: RealizedSeries, burn_in=BURN_IN):
    """Post burn-in residuals (n_eff, q) of the open and overnight regimes."""
    coefs = derive_coefficients(theta, data.tau)
    outer = data.outer(theta.mu)
    path = filter_volatility(coefs, data.rv, outer, data.tau)
    pos = vech_positions(data.p)
    tau = data.tau
    e_h = vech(data.rv) - tau * path.high[:data.n, pos]
    e_l = vech(outer) - (1.0 - tau) * path.low[:, pos]
    return e_h[burn_in:], e_l[burn_in:]


# --- parameterization ----------------------------------------------------

class _Transform:
    """Maps an unconstrained vector to GarchParams.

    Intercepts are scale * C C' with C lower triangular and log-diagonal;
    loadings are raw lower-triangular entries; mu is scaled by the
    overnight return dispersion. ``active`` selects the blocks that move.
    """

    BLOCKS = ("omega_high", "omega_low") + LOADINGS + ("mu",)

    def __init__(self, p, scale_high, scale_low, mu_scale, active, base: GarchParams):
        self.p = p
        self.q = vech_length(p)
        self.scales = {"omega_high": scale_high, "omega_low": scale_low}
        self.mu_scale = mu_scale
        self.active = tuple(b for b in self.BLOCKS if b in active)
        self.base = base
        self._rows, self._cols = _tril_indices(p)
        self._is_diag = self._rows == self._cols

    def _size(self, block):
        return self.p if block == "mu" else self.q

    @property
    def size(self):
        return sum(self._size(b) for b in self.active)

    def _omega_raw(self, omega, scale):
        lam, vecs = np.linalg.eigh(0.5 * (omega + omega.T))
        floor = max(lam.max(), 1e-12) * 1e-6
        omega = (vecs * np.clip(lam, floor, None)) @ vecs.T
        C = np.linalg.cholesky(omega / scale)
        z = C[self._rows, self._cols].copy()
        z[self._is_diag] = np.log(z[self._is_diag])
        return z

    def _omega(self, z, scale):
        v = z.copy()
        # line-search probes can overflow here; the objective rejects non-finite blocks
        with np.errstate(over="ignore", invalid="ignore"):
            v[self._is_diag] = np.exp(v[self._is_diag])
            C = np.zeros((self.p, self.p))
            C[self._rows, self._cols] = v
            return scale * (C @ C.T)

    def encode(self, theta: GarchParams):
        parts = []
        for b in self.active:
            if b.startswith("omega"):
                parts.append(self._omega_raw(getattr(theta, b), self.scales[b]))
            elif b == "mu":
                parts.append(theta.mu / self.mu_scale)
            else:
                parts.append(vech(getattr(theta, b)))
        return np.concatenate(parts)

    def decode(self, z):
        return GarchParams(**self.decode_arrays(z))

    def chain(self, z, grads):
        """Gradient in z from gradients in the natural blocks.

        ``grads`` maps each block to dL/d(vech entries) for intercepts,
        dL/d(free entries) for loadings and dL/dmu for the drift.
        """
        out = np.empty(z.size)
        i = 0
        for b in self.active:
            k = self._size(b)
            g = grads[b]
            if b.startswith("omega"):
                v = z[i:i + k].copy()
                v[self._is_diag] = np.exp(v[self._is_diag])
                C = np.zeros((self.p, self.p))
                C[self._rows, self._cols] = v
                G = np.zeros((self.p, self.p))
                G[self._rows, self._cols] = g
                dC = self.scales[b] * (G + G.T) @ C
                seg = dC[self._rows, self._cols]
                seg[self._is_diag] *= v[self._is_diag]
                out[i:i + k] = seg
            elif b == "mu":
                out[i:i + k] = g * self.mu_scale
            else:
                out[i:i + k] = g
            i += k
        return out

    def decode_arrays(self, z):
        kw = self.base.to_dict_arrays()
        i = 0
        for b in self.active:
            k = self._size(b)
            seg = z[i:i + k]
            i += k
            if b.startswith("omega"):
                kw[b] = self._omega(seg, self.scales[b])
            elif b == "mu":
                kw[b] = seg * self.mu_scale
            else:
                M = np.zeros((self.p, self.p))
                M[self._rows, self._cols] = seg
                kw[b] = M
        return kw


@njit(cache=True)
def _series(B):
    n = B.shape[0]
    r1 = np.zeros((n, n))
    r2 = np.zeros((n, n))
    r3 = np.zeros((n, n))
    power = np.eye(n)
    f1 = 1.0
    for k in range(SERIES_MAX_TERMS):
        f1 *= k + 1
        r1 += power / f1
        r2 += power / (f1 * (k + 2))
        r3 += power / (f1 * (k + 2) * (k + 3))
        if np.abs(power).max() / f1 < SERIES_TOL:
            break
        power = power @ B
    return r1, r2, r3


@njit(cache=True)
def _solve_similar(rho, M):
    return np.linalg.solve(rho.T, (rho @ M).T).T


@njit(cache=True)
def _well_conditioned(M, limit):
    c = np.linalg.cond(M)
    return np.isfinite(c) and c <= limit


@njit(cache=True)
def _varrho_pair(gh, gl, bh, bl):
    Rh = np.kron(gh, gh)
    Rl = np.kron(gl, gl)
    Bh = np.kron(bh, bh)
    Bl = np.kron(bl, bl)
    h1, h2, h3 = _series(Bh)
    l1, l2, l3 = _series(Bl)
    vh = 2.0 * (h3 @ Rh) + h1 - h2
    vl = 2.0 * (l3 @ Rl) + l1 - l2
    return Rh, Rl, Bh, Bl, vh, vl


@njit(cache=True)
def _operators(gh, gl, bh, bl, pos, dup):
    """Open and overnight (R, A, B), reduced to vech space, stacked in that order."""
    Rh, Rl, Bh, Bl, vh, vl = _varrho_pair(gh, gl, bh, bl)
    mats = (_solve_similar(vh, Rl @ Rh), vh @ Rl @ Bh, vh @ Bl,
            _solve_similar(vl, Rh @ Rl), vl @ Bh, vl @ Rh @ Bl)
    q = pos.shape[0]
    out = np.empty((6, q, dup.shape[1]))
    sub = np.empty((q, dup.shape[0]))
    for k in range(6):
        M = mats[k]
        for a in range(q):
            sub[a] = M[pos[a]]
        out[k] = sub @ dup
    return out


@njit(cache=True)
def _regime_operators(gh, gl, bh, bl, tau, pos, dup):
    """:func:`_operators` after the conditioning checks of :func:`derive_coefficients`.

    ``ok`` is False when a varrho matrix is singular or ill conditioned.
    """
    Rh, Rl, Bh, Bl, vh, vl = _varrho_pair(gh, gl, bh, bl)
    vd = tau * vh + (1.0 - tau) * (vl @ Rh + vl @ Bh @ vh)
    ok = (_well_conditioned(vh, COND_LIMIT) and _well_conditioned(vl, COND_LIMIT)
          and _well_conditioned(vd, COND_LIMIT))
    if not ok:
        return False, np.zeros((6, pos.shape[0], dup.shape[1]))
    return True, _operators(gh, gl, bh, bl, pos, dup)


@njit(cache=True)
def _outer_rows(r, rows, cols):
    n = r.shape[0]
    q = rows.shape[0]
    oo = np.empty((n, q))
    for k in range(n):
        for a in range(q):
            oo[k, a] = r[k, rows[a]] * r[k, cols[a]]
    return oo


@njit(cache=True)
def _regime_pass(c, R, A, B, rv, oo, tau, h0, burn, W, low):
    """Weighted residual sum of one regime and its adjoint gradients.

    Returns (S, dS/dc, dS/dR, dS/dA, dS/dB, dS/doo) where ``oo`` holds the
    vech outer products of the drift-adjusted overnight returns.
    """
    n, q = rv.shape
    sa = 1.0 / tau
    sb = 1.0 / (1.0 - tau)
    lag = 0 if low else 1
    w_h = (1.0 - tau) if low else tau
    H = np.empty((n, q))
    H[0] = h0
    for k in range(1, n):
        for i in range(q):
            acc = c[i]
            for j in range(q):
                acc += R[i, j] * H[k - 1, j] + sa * A[i, j] * rv[k - lag, j] + sb * B[i, j] * oo[k - 1, j]
            H[k, i] = acc
    S = 0.0
    gc = np.zeros(q)
    gR = np.zeros((q, q))
    gA = np.zeros((q, q))
    gB = np.zeros((q, q))
    goo = np.zeros((n, q))
    g_next = np.zeros(q)
    g = np.zeros(q)
    e = np.zeros(q)
    for k in range(n - 1, 0, -1):
        for i in range(q):
            acc = 0.0
            for j in range(q):
                acc += R[j, i] * g_next[j]
            g[i] = acc
        if k >= burn:
            for a in range(q):
                e[a] = (oo[k, a] if low else rv[k, a]) - w_h * H[k, a]
            for a in range(q):
                we = 0.0
                for b in range(q):
                    we += W[a, b] * e[b]
                S += e[a] * we
                g[a] -= 2.0 * w_h * we
                if low:
                    goo[k, a] += 2.0 * we
        for i in range(q):
            gc[i] += g[i]
            for j in range(q):
                gR[i, j] += g[i] * H[k - 1, j]
                gA[i, j] += sa * g[i] * rv[k - lag, j]
                gB[i, j] += sb * g[i] * oo[k - 1, j]
        for j in range(q):
            acc = 0.0
            for i in range(q):
                acc += B[i, j] * g[i]
            goo[k - 1, j] += sb * acc
        for i in range(q):
            g_next[i] = g[i]
    if burn <= 0:
        for a in range(q):
            e[a] = (oo[0, a] if low else rv[0, a]) - w_h * H[0, a]
        for a in range(q):
            we = 0.0
            for b in range(q):
                we += W[a, b] * e[b]
            S += e[a] * we
            if low:
                goo[0, a] += 2.0 * we
    return S, gc, gR, gA, gB, goo


@njit(cache=True)
def _loading_gradient(gh, gl, bh, bl, pos, dup, rows, cols, g_ops, pen_start, pen_weight, step):
    """d(<g_ops, operators> + penalty) along each free loading entry, by central differences."""
    q = rows.shape[0]
    out = np.zeros(4 * q)
    mats = (gh, gl, bh, bl)
    for m in range(4):
        for a in range(q):
            i, j = rows[a], cols[a]
            vals = np.zeros(2)
            for side in range(2):
                sign = 1.0 if side == 0 else -1.0
                work = (gh.copy(), gl.copy(), bh.copy(), bl.copy())
                work[m][i, j] = mats[m][i, j] + sign * step
                ops = _operators(work[0], work[1], work[2], work[3], pos, dup)
                total = 0.0
                for k in range(6):
                    total += np.sum(g_ops[k] * ops[k])
                pen = _loading_penalty(work[0], work[1], work[2], work[3], pen_start, pen_weight, 2.0)
                vals[side] = total + pen
            out[m * q + a] = (vals[0] - vals[1]) / (2.0 * step)
    return out


@njit(cache=True)
def _loading_penalty(gh, gl, bh, bl, start, weight, limit):
    """Smooth penalty on loading norms above ``start``; -1 past ``limit``."""
    pen = 0.0
    for M in (gh, gl, bh, bl):
        s = np.linalg.svd(M)[1][0]
        if s >= limit:
            return -1.0
        if s > start:
            pen += weight * (s - start) ** 2
    return pen


def _penalty(theta):
    pen = _loading_penalty(theta.gamma_high, theta.gamma_low, theta.beta_high, theta.beta_low,
                           PENALTY_START, PENALTY_WEIGHT, NORM_LIMIT)
    return None if pen < 0 else pen


class _Objective:
    """Scaled loss plus penalty on the unconstrained vector; SENTINEL when inadmissible."""

    def __init__(self, data: _Data, weights: WeightMatrices, transform: _Transform,
                 regimes=("high", "low"), scale=1.0):
        self.data = data
        self.weights = weights
        self.transform = transform
        self.regimes = regimes
        self.scale = scale
        self.n_sentinel = 0

    def _value(self, kw):
        gh, gl, bh, bl = (np.ascontiguousarray(kw[name]) for name in LOADINGS)
        if not all(np.all(np.isfinite(M)) for M in (gh, gl, bh, bl, kw["omega_high"], kw["omega_low"])):
            return None
        pen = _loading_penalty(gh, gl, bh, bl, PENALTY_START, PENALTY_WEIGHT, NORM_LIMIT)
        if pen < 0:
            return None
        d = self.data
        ok, ops = _regime_operators(gh, gl, bh, bl, d.tau, d.pos, d.dup)
        if not ok:
            return None
        r = np.ascontiguousarray(d.series.overnight - (1.0 - d.tau) * kw["mu"])
        s_h, s_l = _wlse_sums(vech(kw["omega_high"]), ops[0], ops[1], ops[2],
                              vech(kw["omega_low"]), ops[3], ops[4], ops[5],
                              d.rv, r, d.rows, d.cols, d.tau, d.h0, d.burn,
                              self.weights.inv_high, self.weights.inv_low,
                              "high" in self.regimes, "low" in self.regimes)
        val = self.scale * (s_h + s_l) / (2.0 * d.n_eff)
        if not np.isfinite(val):
            return None
        return val + pen

    def value(self, theta: GarchParams):
        return self._value(theta.to_dict_arrays())

    def __call__(self, z):
        val = self._value(self.transform.decode_arrays(z))
        if val is None:
            self.n_sentinel += 1
            return SENTINEL
        return val

    def value_and_grad(self, z):
        """Objective and its gradient in z: adjoint pass through the recursions,
        central differences of the loading-to-operator map."""
        kw = self.transform.decode_arrays(z)
        val = self._value(kw)
        if val is None:
            self.n_sentinel += 1
            return SENTINEL, np.zeros(z.size)
        d = self.data
        gh, gl, bh, bl = (np.ascontiguousarray(kw[name]) for name in LOADINGS)
        ops = _operators(gh, gl, bh, bl, d.pos, d.dup)
        r = np.ascontiguousarray(d.series.overnight - (1.0 - d.tau) * kw["mu"])
        oo = _outer_rows(r, d.rows, d.cols)
        q = d.rows.size
        factor = self.scale / (2.0 * d.n_eff)
        g_ops = np.zeros((6, q, q))
        g_c = {"omega_high": np.zeros(q), "omega_low": np.zeros(q)}
        g_oo = np.zeros_like(oo)
        passes = (("high", "omega_high", 0, self.weights.inv_high, False),
                  ("low", "omega_low", 3, self.weights.inv_low, True))
        for regime, name, k0, W, low in passes:
            if regime not in self.regimes:
                continue
            _, gc, gR, gA, gB, goo = _regime_pass(vech(kw[name]), ops[k0], ops[k0 + 1], ops[k0 + 2],
                                                  d.rv, oo, d.tau, d.h0, d.burn, W, low)
            g_c[name] = factor * gc
            g_ops[k0], g_ops[k0 + 1], g_ops[k0 + 2] = factor * gR, factor * gA, factor * gB
            g_oo += factor * goo
        grads = dict(g_c)
        if any(b in self.transform.active for b in LOADINGS):
            g_load = _loading_gradient(gh, gl, bh, bl, d.pos, d.dup, d.rows, d.cols, g_ops,
                                       PENALTY_START, PENALTY_WEIGHT, LOADING_STEP)
            for m, name in enumerate(LOADINGS):
                grads[name] = g_load[m * q:(m + 1) * q]
        g_r = np.zeros_like(r)
        np.add.at(g_r.T, d.rows, (g_oo * r[:, d.cols]).T)
        np.add.at(g_r.T, d.cols, (g_oo * r[:, d.rows]).T)
        grads["mu"] = -(1.0 - d.tau) * g_r.sum(axis=0)
        return val, self.transform.chain(z, grads)


def _minimize(objective, z0, maxiter, ftol=1e-10, gtol=1e-6):
    if isinstance(objective, _Objective):
        return minimize(objective.value_and_grad, z0, jac=True, method="L-BFGS-B",
                        options=dict(maxiter=maxiter, maxfun=5 * maxiter, ftol=ftol, gtol=gtol))
    return minimize(objective, z0, method="L-BFGS-B",
                    options=dict(maxiter=maxiter, maxfun=60 * maxiter, ftol=ftol, gtol=gtol))


# --- starting values -----------------------------------------------------

def _moment_intercepts(gh, gl, bh, bl, data: _Data, mu):
    """Intercepts matching the sample means of the two innovations."""
    p = data.p
    probe = GarchParams(np.eye(p), np.eye(p), gh, gl, bh, bl, mu)
    coefs = derive_coefficients(probe, data.tau)
    tau = data.tau
    mean_h = vec(data.series.rv.mean(axis=0)) / tau
    mean_l = vec(data.series.outer(mu).mean(axis=0)) / (1.0 - tau)
    eye = np.eye(p * p)
    hi, lo = coefs.high, coefs.low
    w_h = (eye - hi.R - hi.A) @ mean_h - hi.B @ mean_l
    w_l = (eye - lo.R - lo.B) @ mean_l - lo.A @ mean_h
    out = []
    for w, mean in ((w_h, mean_h), (w_l, mean_l)):
        W = unvec(w, p)
        W = 0.5 * (W + W.T)
        lam, vecs = np.linalg.eigh(W)
        floor = 0.05 * np.trace(unvec(mean, p)) / p
        out.append((vecs * np.clip(lam, floor, None)) @ vecs.T)
    return out


_GRID = dict(gamma_high=(0.2, 0.5, 0.8), gamma_low=(0.3, 0.6, 0.9), beta_high=(0.3, 0.6, 0.85),
             beta_low=(0.1, 0.3, 0.5))


def _grid_starts(data: _Data, mu):
    p = data.p
    eye = np.eye(p)
    for gh in _GRID["gamma_high"]:
        for gl in _GRID["gamma_low"]:
            for bh in _GRID["beta_high"]:
                for bl in _GRID["beta_low"]:
                    try:
                        w_h, w_l = _moment_intercepts(gh * eye, gl * eye, bh * eye, bl * eye, data, mu)
                    except (DomainError, NumericError, np.linalg.LinAlgError):
                        continue
                    yield GarchParams(w_h, w_l, gh * eye, gl * eye, bh * eye, bl * eye, mu)


def _data_scales(data: _Data):
    tau = data.tau
    s_h = np.trace(data.series.rv.mean(axis=0)) / (tau * data.p)
    s_l = np.trace(data.series.outer().mean(axis=0)) / ((1.0 - tau) * data.p)
    mu_scale = max(float(np.std(data.series.overnight)), 1e-8)
    # normalizers making identity-weight losses O(1); they do not move the argmin
    v_h = float(np.mean(np.var(vech(data.series.rv), axis=0)))
    v_l = float(np.mean(np.var(vech(data.series.outer()), axis=0)))
    return max(s_h, 1e-12), max(s_l, 1e-12), mu_scale, max(v_h, 1e-300), max(v_l, 1e-300)


# --- stage 1 -------------------------------------------------------------

def stage1_lse(data: RealizedSeries, regime, burn_in=BURN_IN, maxiter=200, start=None,
               _prepared=None):
    """Identity-weight fit of one regime.

    The open-period fit holds mu at its moment estimate; the overnight fit
    estimates mu. Both move all four loading matrices and their own
    intercept. The returned parameters carry the moment-based intercept for
    the other regime, which the regime's loss does not depend on.
    """
    if regime not in ("high", "low"):
        raise DomainError(f"regime must be 'high' or 'low', got {regime!r}")
    d = _prepared or _Data(data, burn_in)
    s_h, s_l, mu_scale, v_h, v_l = _data_scales(d)
    mu0 = d.series.overnight.mean(axis=0) / (1.0 - d.tau)
    scale = 1.0 / (v_h if regime == "high" else v_l)
    identity = WeightMatrices.identity(d.p)
    active = (("omega_high",) if regime == "high" else ("omega_low", "mu")) + LOADINGS

    if start is None:
        probe = _Objective(d, identity, None, (regime,), scale)
        best, best_val = None, np.inf
        for cand in _grid_starts(d, mu0):
            val = probe.value(cand)
            if val is not None and val < best_val:
                best, best_val = cand, val
        if best is None:
            raise NumericError("no admissible starting value")
        start = best
    tr = _Transform(d.p, s_h, s_l, mu_scale, active, start)
    obj = _Objective(d, identity, tr, (regime,), scale)
    res = _minimize(obj, tr.encode(start), maxiter, ftol=STAGE1_FTOL, gtol=1e-5)
    res, converged = _polish(obj, res, maxiter, rounds=1)
    theta = tr.decode(res.x).normalized_signs()
    flags = [] if converged else [f"stage-1 {regime} not converged: {res.message}"]
    return FitResult(theta=theta, loss=float(res.fun) / scale, converged=converged,
                     n_iter=int(res.nit), message=str(res.message), flags=flags)


def weight_matrices(data: RealizedSeries, theta_high: GarchParams, theta_low: GarchParams,
                    burn_in=BURN_IN):
    """Stage-1 residual covariances plus a ridge of mean-diagonal * n^(-3/5)."""
    e_h, _ = regime_residuals(theta_high, data, burn_in)
    _, e_l = regime_residuals(theta_low, data, burn_in)
    n = e_h.shape[0]
    v_h = e_h.T @ e_h / n
    v_l = e_l.T @ e_l / n
    ridge_h = float(np.mean(np.diag(v_h))) * n ** RIDGE_EXPONENT
    ridge_l = float(np.mean(np.diag(v_l))) * n ** RIDGE_EXPONENT
    q = v_h.shape[0]
    return WeightMatrices(v_h + ridge_h * np.eye(q), v_l + ridge_l * np.eye(q), ridge_h, ridge_l)


def _combine(theta_h: GarchParams, theta_l: GarchParams, loadings_from):
    src = theta_h if loadings_from == "high" else theta_l
    return GarchParams(theta_h.omega_high, theta_l.omega_low, src.gamma_high, src.gamma_low,
                       src.beta_high, src.beta_low, theta_l.mu)


def _feasible_perturbation(objective, z0, rng, tries=20):
    """Random restart near ``z0``, shrinking the kick until the objective is admissible."""
    scale = PERTURB_SCALE
    for _ in range(tries):
        z = z0 + rng.normal(scale=scale, size=z0.size)
        if objective(z) < SENTINEL:
            return z
        scale *= 0.7
    return z0.copy()


def _polish(objective, res, maxiter, rounds=3):
    """Restart L-BFGS from its own solution until the loss stops moving.

    A restart discards the curvature memory, which helps on the flat
    valleys of this loss. Returns the final result and whether the last
    restart left the loss unchanged to 1e-9 relative.
    """
    for _ in range(rounds):
        nxt = _minimize(objective, res.x, maxiter)
        improved = res.fun - nxt.fun
        if nxt.fun < res.fun:
            res = nxt
        if improved <= 1e-9 * max(abs(res.fun), 1.0):
            return res, True
    return res, bool(res.success)


def fit_wlse(data: RealizedSeries, burn_in=BURN_IN, n_starts=6, maxiter=400, seed=0,
             start: GarchParams = None, weights: WeightMatrices = None):
    """Full two-stage fit.

    Candidate starts are the two stage-1 combinations (loadings from either
    regime) and a grid of scalar loadings with moment-matched intercepts,
    all scored under the weighted loss. The best stage-1 combination (or
    ``start`` when given) and the best ``n_starts - 1`` grid points are
    optimized; the winner is polished by restarts.
    """
    d = _Data(data, burn_in)
    stages = {}
    if weights is None or start is None:
        st_h = stage1_lse(data, "high", burn_in, _prepared=d)
        st_l = stage1_lse(data, "low", burn_in, _prepared=d)
        stages = {"high": st_h, "low": st_l}
    if weights is None:
        weights = weight_matrices(data, st_h.theta, st_l.theta, burn_in)
    s_h, s_l, mu_scale, _, _ = _data_scales(d)
    full = _Objective(d, weights, None)

    def score(theta):
        v = full.value(theta)
        return np.inf if v is None else v

    if start is None:
        start = min((_combine(st_h.theta, st_l.theta, src) for src in ("high", "low")), key=score)
    starts = [start]
    if n_starts > 1:
        mu0 = start.mu
        grid = sorted(_grid_starts(d, mu0), key=score)
        starts += [g for g in grid if np.isfinite(score(g))][:n_starts - 1]
    tr = _Transform(d.p, s_h, s_l, mu_scale, _Transform.BLOCKS, start)
    full.transform = tr
    rng = np.random.default_rng(seed)
    while len(starts) < n_starts:
        starts.append(tr.decode(_feasible_perturbation(full, tr.encode(start), rng)))
    best = None
    start_losses = []
    for theta0 in starts:
        res = _minimize(full, tr.encode(theta0), maxiter)
        start_losses.append(float(res.fun))
        if best is None or res.fun < best.fun:
            best = res
    best, converged = _polish(full, best, maxiter)
    theta = tr.decode(best.x).normalized_signs()
    flags = []
    for st in stages.values():
        flags.extend(st.flags)
    if not converged:
        flags.append(f"WLSE not converged: {best.message}")
    if full.n_sentinel:
        flags.append(f"{full.n_sentinel} objective evaluations hit the sentinel")
    flags.extend(theta.violations())
    return FitResult(theta=theta, loss=float(best.fun), converged=converged,
                     n_iter=int(best.nit), message=str(best.message), start_losses=start_losses,
                     weights=weights, flags=flags, stages=stages)


# --- sandwich covariance -------------------------------------------------

def _model_outputs(theta_vec, p, data: RealizedSeries, burn_in):
    theta = GarchParams.from_vector(theta_vec, p)
    coefs = derive_coefficients(theta, data.tau)
    outer = data.outer(theta.mu)
    path = filter_volatility(coefs, data.rv, outer, data.tau)
    pos = vech_positions(p)
    tau = data.tau
    m_h = tau * path.high[:data.n, pos]
    # the fitted overnight quantity enters the residual as oo(mu) - (1-tau) h_L
    m_l = (1.0 - tau) * path.low[:, pos] - vech(outer)
    return m_h[burn_in:], m_l[burn_in:]


def sandwich_covariance(theta: GarchParams, data: RealizedSeries, weights: WeightMatrices,
                        burn_in=BURN_IN, rel_step=1e-5):
    """Plug-in H^-1 S H^-1 / n with finite-difference Jacobians of the filters.

    H averages J' V^-1 J and S averages the outer products of the per-day
    scores J' V^-1 e, summed over the two regimes.
    """
    p = theta.p
    t0 = theta.to_vector()
    k = t0.size
    m_h, m_l = _model_outputs(t0, p, data, burn_in)
    e_h = vech(data.rv)[burn_in:] - m_h
    e_l = -m_l
    n_eff, q = m_h.shape
    J_h = np.empty((n_eff, q, k))
    J_l = np.empty((n_eff, q, k))
    for j in range(k):
        h = rel_step * max(abs(t0[j]), 0.01)
        tp, tm = t0.copy(), t0.copy()
        tp[j] += h
        tm[j] -= h
        ph, pl = _model_outputs(tp, p, data, burn_in)
        mh, ml = _model_outputs(tm, p, data, burn_in)
        J_h[:, :, j] = (ph - mh) / (2 * h)
        J_l[:, :, j] = (pl - ml) / (2 * h)
    Wh, Wl = weights.inv_high, weights.inv_low
    score = (np.einsum("nqk,qr,nr->nk", J_h, Wh, e_h) + np.einsum("nqk,qr,nr->nk", J_l, Wl, e_l))
    H = (np.einsum("nqk,qr,nrl->kl", J_h, Wh, J_h) + np.einsum("nqk,qr,nrl->kl", J_l, Wl, J_l)) / n_eff
    S = score.T @ score / n_eff
    H = 0.5 * (H + H.T)
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise NumericError("Hessian approximation is singular") from exc
    if np.linalg.cond(H) > 1e14:
        raise NumericError("Hessian approximation is singular")
    cov = Hinv @ S @ Hinv / n_eff
    return 0.5 * (cov + cov.T)


# --- scaled MGI baseline -------------------------------------------------

@dataclass
class MGIFit:
    omega: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    scaling: np.ndarray
    loss: float
    converged: bool
    flags: list = field(default_factory=list)

    def coefficients(self):
        return _mgi_coefficients(self.gamma, self.beta)

    def forecast(self, series: RealizedSeries, scaled=True, psd=True):
        """Next-day forecast: the open-to-close recursion, then Lambda h Lambda."""
        R, A = self.coefficients()
        rv_v = _vec_rows(series.rv)
        zeros = np.zeros_like(rv_v)
        h = _recursion(vec(self.omega), R, A, np.zeros_like(R), rv_v, zeros, 0, 1.0, 0.0,
                       rv_v[0].copy(), series.n + 1)
        H = unvec(h[-1])
        H = 0.5 * (H + H.T)
        if scaled:
            H = self.scaling @ H @ self.scaling
        return project_psd(H) if psd else H


def _vec_rows(stack):
    return np.ascontiguousarray(stack.transpose(0, 2, 1).reshape(stack.shape[0], -1))


def _mgi_coefficients(gamma, beta):
    R = kron(gamma, gamma)
    B = kron(beta, beta)
    r1, r2, r3 = varrho_series(B)
    rho = 2.0 * r3 @ R + r1 - r2
    return _similar(rho, R), rho @ B


def mgi_scaling(series: RealizedSeries):
    rv_bar = np.diag(series.rv.mean(axis=0))
    ov_bar = np.diag(series.outer().mean(axis=0))
    if np.any(rv_bar <= 0):
        raise DomainError("mean realized variance must be positive on the diagonal")
    return np.diag(np.sqrt((rv_bar + ov_bar) / rv_bar))


def fit_mgi_baseline(data: RealizedSeries, burn_in=BURN_IN, maxiter=400):
    """Least-squares fit of the open-to-close-only GARCH-Ito recursion."""
    d = _Data(data, burn_in)
    p = d.p
    pos = vech_positions(p)
    target = vech(data.rv)[burn_in:]
    rv_v = _vec_rows(data.rv)
    zeros = np.zeros_like(rv_v)
    norm = 1.0 / max(float(np.mean(np.var(target, axis=0))), 1e-300)
    s_h = np.trace(data.rv.mean(axis=0)) / p
    tr = _Transform(p, s_h, s_h, 1.0, ("omega_high", "gamma_high", "beta_high"),
                    GarchParams(np.eye(p), np.eye(p), np.eye(p), np.eye(p), np.zeros((p, p)),
                                np.zeros((p, p))))
    n_bad = [0]

    def value(theta):
        for M in (theta.gamma_high, theta.beta_high):
            if spectral_norm(M) >= NORM_LIMIT:
                return None
        try:
            R, A = _mgi_coefficients(theta.gamma_high, theta.beta_high)
        except (DomainError, NumericError, np.linalg.LinAlgError):
            return None
        h = _recursion(vec(theta.omega_high), R, A, np.zeros_like(R), rv_v, zeros, 0, 1.0, 0.0,
                       rv_v[0].copy(), d.n)
        e = target - h[burn_in:, pos]
        v = norm * float(np.sum(e * e)) / (2.0 * d.n_eff)
        return v + (_penalty(theta) or 0.0) if np.isfinite(v) else None

    def fun(z):
        try:
            v = value(tr.decode(z))
        except (DomainError, np.linalg.LinAlgError):
            v = None
        if v is None:
            n_bad[0] += 1
            return SENTINEL
        return v

    best, best_val = None, np.inf
    eye = np.eye(p)
    mean_rv = vec(data.rv.mean(axis=0))
    for g in (0.3, 0.6):
        for b in (0.4, 0.8):
            try:
                R, A = _mgi_coefficients(g * eye, b * eye)
            except (DomainError, NumericError):
                continue
            W = unvec((np.eye(p * p) - R - A) @ mean_rv, p)
            lam, vecs = np.linalg.eigh(0.5 * (W + W.T))
            W = (vecs * np.clip(lam, 0.05 * lam.max() if lam.max() > 0 else 1e-8, None)) @ vecs.T
            cand = GarchParams(W, np.eye(p), g * eye, eye, b * eye, np.zeros((p, p)))
            v = value(cand)
            if v is not None and v < best_val:
                best, best_val = cand, v
    if best is None:
        raise NumericError("no admissible MGI starting value")
    res = _minimize(fun, tr.encode(best), maxiter)
    theta = tr.decode(res.x).normalized_signs()
    flags = [] if res.success else [f"MGI not converged: {res.message}"]
    return MGIFit(theta.omega_high, theta.gamma_high, theta.beta_high, mgi_scaling(data),
                  float(res.fun) / norm, bool(res.success), flags)


# --- estimator wrappers --------------------------------------------------

class MOGIEstimator(BaseEstimator):
    """scikit-learn style wrapper: ``fit(series)`` then ``predict(series)``."""

    def __init__(self, burn_in=BURN_IN, n_starts=6, maxiter=400, seed=0, day_state="day",
                 compute_covariance=False):
        self.burn_in = burn_in
        self.n_starts = n_starts
        self.maxiter = maxiter
        self.seed = seed
        self.day_state = day_state
        self.compute_covariance = compute_covariance

    def fit(self, X, y=None):
        self.fit_result_ = fit_wlse(X, self.burn_in, self.n_starts, self.maxiter, self.seed)
        self.theta_ = self.fit_result_.theta
        if self.compute_covariance:
            self.fit_result_.covariance = sandwich_covariance(self.theta_, X, self.fit_result_.weights,
                                                              self.burn_in)
        return self

    def predict(self, X, psd=True):
        """Forecast of the whole-day volatility matrix for the day after ``X``."""
        from .model import forecast_next

        return forecast_next(self.theta_, X, psd=psd, day_state=self.day_state)


class MGIEstimator(BaseEstimator):
    def __init__(self, burn_in=BURN_IN, maxiter=400):
        self.burn_in = burn_in
        self.maxiter = maxiter

    def fit(self, X, y=None):
        self.fit_result_ = fit_mgi_baseline(X, self.burn_in, self.maxiter)
        return self

    def predict(self, X, psd=True):
        return self.fit_result_.forecast(X, scaled=True, psd=psd)

"""Recursion coefficients, conditional-volatility filters and forecasts.

All recursions live in vec space (length p**2). ``h_high`` and ``h_low`` are
per-unit-time rates for the open-to-close and close-to-open periods, so the
expected integrated volatility over the open period is ``tau * h_high``. The
whole-day state ``h_day`` is already a one-day integral.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from ._validation import check_matrix_stack, check_tau, check_vector
from .exceptions import DomainError, NumericError
from .kernels import kron, spectral_norm, unvec, varrho_series, vec
from .params import GarchParams, StructuralParams

COND_LIMIT = 1e12
REGIMES = ("high", "low", "day")


@dataclass(frozen=True)
class GarchCoefficients:
    """Recursion h_n = c + R h_{n-1} + (A / tau) vec(RV) + (B / (1 - tau)) vec(r r').

    ``varrho`` is the regime's series matrix (the whole-day one for ``day``).
    """

    regime: str
    intercept: np.ndarray
    R: np.ndarray
    A: np.ndarray
    B: np.ndarray
    varrho: np.ndarray

    @property
    def p(self):
        return self.intercept.shape[0]

    @property
    def spectral_norm(self):
        return spectral_norm(self.R)

    @property
    def stable(self):
        return self.spectral_norm < 1.0

    def step(self, h_prev, rv, outer, tau):
        return _affine_step(self, h_prev, rv, outer, tau)


class ModelCoefficients(NamedTuple):
    high: GarchCoefficients
    low: GarchCoefficients
    day: GarchCoefficients


@dataclass
class _Blocks:
    tau: float
    R_h: np.ndarray
    R_l: np.ndarray
    B_h: np.ndarray
    B_l: np.ndarray
    series_h: tuple
    series_l: tuple
    varrho_h: np.ndarray
    varrho_l: np.ndarray
    varrho: np.ndarray


def _similar(rho, M):
    """rho @ M @ inv(rho) via a linear solve."""
    lhs = rho @ M
    return np.linalg.solve(rho.T, lhs.T).T


def _check_conditioning(M, name):
    c = np.linalg.cond(M)
    if not np.isfinite(c) or c > COND_LIMIT:
        raise NumericError(f"{name} is singular or ill conditioned (cond={c:.3e})")


def _blocks(gamma_h, gamma_l, beta_h, beta_l, tau):
    for name, M in (("beta_h", beta_h), ("beta_l", beta_l)):
        if spectral_norm(M) >= 1.0:
            raise DomainError(f"{name} must have spectral norm below one")
    R_h, R_l = kron(gamma_h, gamma_h), kron(gamma_l, gamma_l)
    B_h, B_l = kron(beta_h, beta_h), kron(beta_l, beta_l)
    s_h = varrho_series(B_h, check=False)
    s_l = varrho_series(B_l, check=False)
    varrho_h = 2.0 * s_h[2] @ R_h + s_h[0] - s_h[1]
    varrho_l = 2.0 * s_l[2] @ R_l + s_l[0] - s_l[1]
    varrho = tau * varrho_h + (1.0 - tau) * (varrho_l @ R_h + varrho_l @ B_h @ varrho_h)
    for name, M in (("varrho_high", varrho_h), ("varrho_low", varrho_l), ("varrho", varrho)):
        _check_conditioning(M, name)
    return _Blocks(tau, R_h, R_l, B_h, B_l, s_h, s_l, varrho_h, varrho_l, varrho)


def _dynamic_matrices(b):
    RL_RH = b.R_l @ b.R_h
    high = dict(
        R=_similar(b.varrho_h, RL_RH),
        A=b.varrho_h @ b.R_l @ b.B_h,
        B=b.varrho_h @ b.B_l,
    )
    low = dict(
        R=_similar(b.varrho_l, b.R_h @ b.R_l),
        A=b.varrho_l @ b.B_h,
        B=b.varrho_l @ b.R_h @ b.B_l,
    )
    day = dict(
        R=_similar(b.varrho, RL_RH),
        A=b.varrho @ b.R_l @ b.B_h,
        B=b.varrho @ b.B_l,
    )
    return high, low, day


def whole_day_intercept(omega_high, omega_low, R_high, R_low, A_low, R_day, tau):
    """Whole-day intercept implied by the two regime intercepts."""
    tau = check_tau(tau)
    p = np.shape(omega_high)[0]
    eye = np.eye(p * p)
    try:
        level_h = np.linalg.solve(eye - R_high, vec(omega_high))
        level_l = np.linalg.solve(eye - R_low, vec(omega_low))
    except np.linalg.LinAlgError as exc:
        raise NumericError("resolvent (I - R) is singular") from exc
    inner = ((1.0 - tau) * A_low + tau * eye) @ level_h + (1.0 - tau) * level_l
    return _sym(unvec((eye - R_day) @ inner, p))


def _sym(M):
    return 0.5 * (M + M.T)


def structural_innovation_means(params: StructuralParams, blocks=None):
    """Constant parts of the expected open and overnight integrals.

    Returns (b_high, b_low, omega_h, omega_l): the open-period and overnight
    intercept vectors entering E[integral | start-of-period Sigma] and the
    end-of-period constants omega_h = gamma_h omega_h1 gamma_h' - omega_h2
    (likewise low).
    """
    b = blocks or _blocks(params.gamma_h, params.gamma_l, params.beta_h, params.beta_l, params.tau)
    h1, h2, h3 = b.series_h
    l1, l2, l3 = b.series_l
    nn = params.nu @ params.nu.T
    b_high = (2.0 * h3 @ b.R_h @ vec(params.omega_h1) - h2 @ vec(params.omega_h2)
              + (h2 - 2.0 * h3) @ vec(nn))
    b_low = 2.0 * l3 @ b.R_l @ vec(params.omega_l1) - l2 @ vec(params.omega_l2)
    omega_h = params.gamma_h @ params.omega_h1 @ params.gamma_h.T - params.omega_h2
    omega_l = params.gamma_l @ params.omega_l1 @ params.gamma_l.T - params.omega_l2
    return b_high, b_low, omega_h, omega_l


def derive_coefficients(params, tau=None):
    """Recursion coefficients for the open, overnight and whole-day regimes.

    For :class:`StructuralParams` the three intercepts are the ground-truth
    values implied by the diffusion. For :class:`GarchParams` the two regime
    intercepts are free and the whole-day one follows from them.
    """
    if isinstance(params, StructuralParams):
        tau = params.tau if tau is None else check_tau(tau)
        g_h, g_l, b_h, b_l = params.gamma_h, params.gamma_l, params.beta_h, params.beta_l
    elif isinstance(params, GarchParams):
        if tau is None:
            raise DomainError("tau is required with GarchParams")
        tau = check_tau(tau)
        g_h, g_l, b_h, b_l = params.gamma_high, params.gamma_low, params.beta_high, params.beta_low
    else:
        raise DomainError(f"unsupported parameter type {type(params).__name__}")

    blocks = _blocks(g_h, g_l, b_h, b_l, tau)
    high, low, day = _dynamic_matrices(blocks)
    p = g_h.shape[0]
    eye = np.eye(p * p)

    if isinstance(params, StructuralParams):
        b_high, b_low, omega_h, omega_l = structural_innovation_means(params, blocks)
        w_h, w_l = vec(omega_h), vec(omega_l)
        c_high = (eye - high["R"]) @ b_high + blocks.varrho_h @ w_l + blocks.varrho_h @ blocks.R_l @ w_h
        c_low = (eye - low["R"]) @ b_low + blocks.varrho_l @ w_h + blocks.varrho_l @ blocks.R_h @ w_l
        carry = (((1.0 - tau) * blocks.varrho_l @ blocks.B_h + tau * eye) @ b_high
                 + (1.0 - tau) * b_low + (1.0 - tau) * blocks.varrho_l @ w_h)
        c_day = (eye - day["R"]) @ carry + blocks.varrho @ w_l + blocks.varrho @ blocks.R_l @ w_h
        omega_high, omega_low, omega_day = (_sym(unvec(c, p)) for c in (c_high, c_low, c_day))
    else:
        omega_high, omega_low = params.omega_high, params.omega_low
        omega_day = whole_day_intercept(omega_high, omega_low, high["R"], low["R"], low["A"], day["R"], tau)

    return ModelCoefficients(
        GarchCoefficients("high", omega_high, varrho=blocks.varrho_h, **high),
        GarchCoefficients("low", omega_low, varrho=blocks.varrho_l, **low),
        GarchCoefficients("day", omega_day, varrho=blocks.varrho, **day),
    )


def true_garch_params(params: StructuralParams) -> GarchParams:
    """The theta implied by a structural parameter set."""
    coefs = derive_coefficients(params)
    for name in ("gamma_h", "gamma_l", "beta_h", "beta_l"):
        M = getattr(params, name)
        if np.abs(np.triu(M, 1)).max() > 0:
            raise DomainError(f"{name} is not lower triangular, theta is not defined")
    return GarchParams(
        omega_high=coefs.high.intercept,
        omega_low=coefs.low.intercept,
        gamma_high=params.gamma_h,
        gamma_low=params.gamma_l,
        beta_high=params.beta_h,
        beta_low=params.beta_l,
        mu=params.mu,
    )


class ConditionalMoments:
    """Exact conditional expectations of integrated volatility given spot Sigma.

    Used as the simulation oracle: given Sigma at the open, the expected
    open-period integral; given Sigma at the close, the expected overnight
    integral; given Sigma at the start of a day, the expected whole-day
    integral.
    """

    def __init__(self, params: StructuralParams):
        self.params = params
        self._b = _blocks(params.gamma_h, params.gamma_l, params.beta_h, params.beta_l, params.tau)
        self.b_high, self.b_low, omega_h, _ = structural_innovation_means(params, self._b)
        tau = params.tau
        p2 = params.p ** 2
        self._day_const = ((((1.0 - tau) * self._b.varrho_l @ self._b.B_h + tau * np.eye(p2)) @ self.b_high)
                           + (1.0 - tau) * self.b_low + (1.0 - tau) * self._b.varrho_l @ vec(omega_h))

    def _apply(self, const, M, sigma):
        sigma = np.asarray(sigma, dtype=float)
        p = self.params.p
        flat = sigma.reshape(sigma.shape[:-2] + (p * p,), order="C")
        # Sigma is symmetric so row-major and column-major flattening agree
        out = const + flat @ M.T
        return _sym_stack(unvec(out, p))

    def open_integral(self, sigma_open):
        return self._apply(self.params.tau * self.b_high, self.params.tau * self._b.varrho_h, sigma_open)

    def overnight_integral(self, sigma_close):
        tau = self.params.tau
        return self._apply((1.0 - tau) * self.b_low, (1.0 - tau) * self._b.varrho_l, sigma_close)

    def day_integral(self, sigma_start):
        return self._apply(self._day_const, self._b.varrho, sigma_start)


def _sym_stack(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


# --- one-step recursions -------------------------------------------------

def _affine_step(coef, h_prev, rv, outer, tau):
    p = coef.p
    h_prev = check_vector(h_prev, "h_prev", p * p)
    rv = np.asarray(rv, dtype=float)
    outer = np.asarray(outer, dtype=float)
    if rv.shape != (p, p) or outer.shape != (p, p):
        raise DomainError(f"innovations must be {p}x{p} matrices")
    return (vec(coef.intercept) + coef.R @ h_prev + coef.A @ vec(rv) / tau
            + coef.B @ vec(outer) / (1.0 - tau))


def step_h_H(h_prev, coef_high, rv_prev, outer_prev, tau):
    """Open-period rate for day n from day n-1's realized measure and night n-1."""
    return _affine_step(coef_high, h_prev, rv_prev, outer_prev, tau)


def step_h_L(h_prev, coef_low, rv_same_day, outer_prev, tau):
    """Overnight rate for night n from day n's realized measure and night n-1."""
    return _affine_step(coef_low, h_prev, rv_same_day, outer_prev, tau)


def step_h_day(h_prev, coef_day, rv_prev, outer_prev, tau):
    """Whole-day integrated volatility for day n from day n-1 innovations."""
    return _affine_step(coef_day, h_prev, rv_prev, outer_prev, tau)


# --- filters over a sample -----------------------------------------------

@njit(cache=True)
def _recursion(c, R, A, B, x_a, x_b, shift, sa, sb, h0, n_out):
    """h[k] = c + R h[k-1] + sa A x_a[k-1+shift] + sb B x_b[k-1]."""
    d = c.shape[0]
    h = np.empty((n_out, d))
    h[0] = h0
    for k in range(1, n_out):
        xa = x_a[k - 1 + shift]
        xb = x_b[k - 1]
        for i in range(d):
            acc = c[i]
            for j in range(d):
                acc += R[i, j] * h[k - 1, j] + sa * A[i, j] * xa[j] + sb * B[i, j] * xb[j]
            h[k, i] = acc
    return h


@dataclass
class FilterPath:
    """Filtered states; row k belongs to day k + 1 (zero based rows).

    ``high`` and ``day`` have n + 1 rows, the last one being the one-day
    ahead forecast. ``low`` has n rows.
    """

    high: np.ndarray
    low: np.ndarray
    day: np.ndarray

    def matrices(self, which="day"):
        return _sym_stack(unvec(getattr(self, which)))


def initial_state(rv, tau, h0="first_rv"):
    p = rv.shape[1]
    if isinstance(h0, str):
        if h0 != "first_rv":
            raise DomainError(f"unknown initialization policy {h0!r}")
        start = vec(rv[0]) / tau
        return start, start.copy(), start.copy()
    h0 = [check_vector(x, "h0", p * p) for x in h0]
    if len(h0) != 3:
        raise DomainError("explicit h0 needs (high, low, day) vectors")
    return tuple(h0)


def filter_volatility(coefs: ModelCoefficients, rv, outer, tau, h0="first_rv", day_state="day"):
    """Run the three recursions over a sample.

    ``rv`` and ``outer`` are (n, p, p) stacks: open-to-close realized
    measures and overnight return outer products. ``day_state`` selects the
    lagged state in the whole-day recursion: its own lag (``"day"``) or the
    open-period state (``"high"``).
    """
    tau = check_tau(tau)
    rv = check_matrix_stack(rv, "rv")
    outer = check_matrix_stack(outer, "outer", rv.shape[1])
    if outer.shape[0] != rv.shape[0]:
        raise DomainError("rv and outer must cover the same days")
    n, p = rv.shape[0], rv.shape[1]
    if coefs.high.p != p:
        raise DomainError("coefficient dimension does not match the data")
    rv_v = np.ascontiguousarray(rv.transpose(0, 2, 1).reshape(n, p * p))
    oo_v = np.ascontiguousarray(outer.transpose(0, 2, 1).reshape(n, p * p))
    h0h, h0l, h0d = initial_state(rv, tau, h0)
    sa, sb = 1.0 / tau, 1.0 / (1.0 - tau)
    hi, lo, dy = coefs.high, coefs.low, coefs.day
    high = _recursion(vec(hi.intercept), hi.R, hi.A, hi.B, rv_v, oo_v, 0, sa, sb, h0h, n + 1)
    low = _recursion(vec(lo.intercept), lo.R, lo.A, lo.B, rv_v, oo_v, 1, sa, sb, h0l, n)
    if day_state == "day":
        day = _recursion(vec(dy.intercept), dy.R, dy.A, dy.B, rv_v, oo_v, 0, sa, sb, h0d, n + 1)
    elif day_state == "high":
        day = np.empty_like(high)
        day[0] = h0d
        c = vec(dy.intercept)
        for k in range(1, n + 1):
            day[k] = c + dy.R @ high[k - 1] + sa * dy.A @ rv_v[k - 1] + sb * dy.B @ oo_v[k - 1]
    else:
        raise DomainError(f"unknown day_state {day_state!r}")
    return FilterPath(high, low, day)


def project_psd(M):
    """Clip negative eigenvalues of a symmetric matrix at zero."""
    M = _sym(np.asarray(M, dtype=float))
    lam, vecs = np.linalg.eigh(M)
    if lam[0] >= 0:
        return M
    return _sym((vecs * np.clip(lam, 0.0, None)) @ vecs.T)


def forecast_next(theta: GarchParams, history, h0="first_rv", psd=True, day_state="day"):
    """One-day-ahead forecast of the whole-day integrated volatility matrix.

    ``history`` is a :class:`~mogi.realized.RealizedSeries`; returns the
    p x p forecast for the day after its last day.
    """
    if history.n < 1:
        raise DomainError("history is empty")
    coefs = derive_coefficients(theta, history.tau)
    path = filter_volatility(coefs, history.rv, history.outer(theta.mu), history.tau, h0, day_state)
    out = _sym(unvec(path.day[-1]))
    return project_psd(out) if psd else out

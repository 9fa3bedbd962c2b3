"""Large-panel pipeline: factor loadings, rank selection, factor-level fits,
POET-type idiosyncratic estimation and large-matrix forecasts.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_matrix_stack, check_tau
from .estimation import BURN_IN, fit_wlse
from .exceptions import DomainError, NumericError
from .model import forecast_next, project_psd
from .params import GarchParams
from .realized import RealizedSeries

log = logging.getLogger(__name__)


def _sign_by_largest_entry(vectors):
    idx = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def loading_variance(rv):
    """Sample variance matrix of the daily realized matrices: mean of (G_k - G_bar)^2 / p."""
    rv = check_matrix_stack(rv, "rv")
    n, p, _ = rv.shape
    dev = rv - rv.mean(axis=0)
    S = np.einsum("kij,kjl->il", dev, dev) / (n * p)
    return 0.5 * (S + S.T)


def estimate_loadings(rv, r):
    """sqrt(p) times the top-r eigenvectors of the variance of the daily realized matrices."""
    rv = check_matrix_stack(rv, "rv")
    n, p, _ = rv.shape
    if n < 2:
        raise DomainError("need at least two days to estimate loadings")
    if not 1 <= r <= p:
        raise DomainError(f"rank must lie in [1, {p}], got {r}")
    S = loading_variance(rv)
    try:
        lam, vecs = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError("eigendecomposition failed") from exc
    if lam[-1] <= 1e-14 * max(np.abs(rv).max(), 1e-300) ** 2:
        raise NumericError("realized matrices do not vary; no loading direction")
    top = vecs[:, ::-1][:, :r]
    return np.sqrt(p) * _sign_by_largest_entry(top)


def daily_eigenvalues(rv, r_max):
    """Largest ``r_max`` eigenvalues of each day's matrix, descending, shape (n, r_max)."""
    rv = check_matrix_stack(rv, "rv")
    lam = np.linalg.eigvalsh(rv)[:, ::-1]
    return lam[:, :r_max]


R_MAX_CAP = 30
R_MAX_FRACTION = 0.15


def default_r_max(p):
    """Largest candidate rank: 15% of p, at least 2 and at most 30 (30 at p = 200)."""
    return int(min(R_MAX_CAP, max(2, np.ceil(R_MAX_FRACTION * p))))


def rank_penalty(p, m, c2=0.5):
    return (np.sqrt(np.log(p) / np.sqrt(m)) + np.log(p) / p) ** c2


def rank_criterion(rv, r_max, m, c1_scale=0.02, c2=0.5, c1_mode="per_day"):
    """Penalized eigenvalue criterion for j = 1..r_max, summed over days."""
    rv = check_matrix_stack(rv, "rv")
    n, p, _ = rv.shape
    if not 2 <= r_max <= p:
        raise DomainError(f"r_max must lie in [2, {p}]")
    lam = daily_eigenvalues(rv, r_max)
    c1 = c1_scale * lam[:, r_max - 1]
    if c1_mode == "global":
        c1 = np.full(n, c1.mean())
    elif c1_mode != "per_day":
        raise DomainError(f"unknown c1 mode {c1_mode!r}")
    j = np.arange(1, r_max + 1)
    crit = lam / p + np.outer(c1, j) * rank_penalty(p, m, c2)
    return crit.sum(axis=0)


def select_rank(rv, r_max, m, c1_scale=0.02, c2=0.5, c1_mode="per_day"):
    """Number of factors: position of the criterion minimum, less one, at least one.

    The first eigenvalue that falls to the idiosyncratic level minimizes the
    criterion, so the factors are the ones before it.
    """
    crit = rank_criterion(rv, r_max, m, c1_scale, c2, c1_mode)
    r = int(np.argmin(crit))  # argmin over j = 1..r_max, minus one
    if r < 1:
        log.warning("rank criterion minimized at j = 1; using one factor")
        r = 1
    return r


@dataclass
class FactorEstimate:
    """Loadings and the factor-level series they induce.

    ``overnight`` holds p^-1 U' (overnight price change), before drift
    removal; :meth:`series` exposes it as a :class:`RealizedSeries`.
    """

    loadings: np.ndarray
    rv: np.ndarray
    overnight: np.ndarray
    tau: float
    rank: int
    eigenvalues: np.ndarray = None

    def __post_init__(self):
        p, r = self.loadings.shape
        gram = self.loadings.T @ self.loadings
        if np.abs(gram - p * np.eye(r)).max() > 1e-6 * p:
            raise DomainError("loadings must satisfy U'U = p I")
        if self.rank < 1:
            raise DomainError("rank must be at least one")

    @property
    def p(self):
        return self.loadings.shape[0]

    @property
    def r(self):
        return self.loadings.shape[1]

    def series(self):
        return RealizedSeries(self.rv, self.overnight, self.tau, dict(factor=True))

    def returns(self, mu=None):
        return self.series().returns(mu)


def project_factor(rv, overnight, loadings, tau, rank=None, eigenvalues=None):
    """RV*_k = p^-2 U' G_k U and p^-1 U' (overnight change)."""
    rv = check_matrix_stack(rv, "rv")
    U = np.asarray(loadings, dtype=float)
    p = U.shape[0]
    if rv.shape[1] != p:
        raise DomainError("loadings and realized matrices disagree on p")
    overnight = np.asarray(overnight, dtype=float)
    rv_star = np.einsum("ia,kij,jb->kab", U, rv, U) / p ** 2
    r_star = overnight @ U / p
    return FactorEstimate(U, 0.5 * (rv_star + rv_star.transpose(0, 2, 1)), r_star, check_tau(tau),
                          rank or U.shape[1], eigenvalues)


def fit_wlse_factor(factor: FactorEstimate, **kw):
    """Weighted least-squares fit of the r-dimensional factor series."""
    return fit_wlse(factor.series(), **kw)


# --- idiosyncratic part --------------------------------------------------

@dataclass
class SparseEstimate:
    matrix: np.ndarray
    levels: np.ndarray
    rule: str
    residual: np.ndarray = field(repr=False, default=None)


def poet_input(rv, overnight):
    """Mean open-period matrix plus the sample covariance of overnight returns."""
    rv = check_matrix_stack(rv, "rv")
    overnight = np.asarray(overnight, dtype=float)
    if rv.shape[0] < 2:
        raise DomainError("need at least two days")
    dev = overnight - overnight.mean(axis=0)
    G = rv.mean(axis=0) + dev.T @ dev / rv.shape[0]
    return 0.5 * (G + G.T)


def remove_top_components(G, r):
    lam, vecs = np.linalg.eigh(0.5 * (G + G.T))
    top = vecs[:, -r:] if r > 0 else vecs[:, :0]
    out = G - (top * lam[-r:]) @ top.T if r > 0 else G.copy()
    return 0.5 * (out + out.T)


def soft_threshold(x, level):
    return np.sign(x) * np.maximum(np.abs(x) - level, 0.0)


def hard_threshold(x, level):
    return np.where(np.abs(x) >= level, x, 0.0)


RULES = {"soft": soft_threshold, "hard": hard_threshold}


def threshold_residual(residual, threshold, rule="soft", sectors=None):
    """Adaptive thresholding of a residual covariance.

    Off-diagonal levels are ``threshold * sqrt(G_ii+ G_jj+)``. With
    ``rule="sector"`` the off-diagonal entries are kept for pairs in the same
    sector and zeroed otherwise. The diagonal is clipped at zero.
    """
    G = np.asarray(residual, dtype=float)
    diag = np.clip(np.diag(G), 0.0, None)
    levels = float(threshold) * np.sqrt(np.outer(diag, diag))
    if rule == "sector":
        if sectors is None:
            raise DomainError("sector rule needs a sector assignment")
        sectors = np.asarray(sectors)
        if sectors.shape != (G.shape[0],):
            raise DomainError("one sector label per asset is required")
        out = np.where(sectors[:, None] == sectors[None, :], G, 0.0)
        levels = np.where(sectors[:, None] == sectors[None, :], 0.0, np.inf)
    else:
        if threshold < 0:
            raise DomainError("threshold must be non-negative")
        try:
            out = RULES[rule](G, levels)
        except KeyError:
            raise DomainError(f"unknown thresholding rule {rule!r}") from None
    np.fill_diagonal(out, diag)
    np.fill_diagonal(levels, 0.0)
    return SparseEstimate(0.5 * (out + out.T), levels, rule, G)


def poet_idiosyncratic(rv, overnight, r, threshold, rule="soft", sectors=None):
    """Idiosyncratic matrix: remove the top-r components of the pooled input, then threshold."""
    residual = remove_top_components(poet_input(rv, overnight), r)
    return threshold_residual(residual, threshold, rule, sectors)


def poet_estimate(G, r, threshold, rule="soft"):
    """Top-r principal part of ``G`` plus the thresholded remainder."""
    G = 0.5 * (np.asarray(G, dtype=float) + np.asarray(G, dtype=float).T)
    residual = remove_top_components(G, r)
    sparse = threshold_residual(residual, threshold, rule)
    return (G - residual) + sparse.matrix


def single_day_threshold(p, m):
    """Threshold for a one-day POET input: sqrt(2 log p / sqrt(m))."""
    return np.sqrt(2.0 * np.log(p) / np.sqrt(m))


def simulation_threshold(p, n):
    return np.sqrt(np.log(p) / n) + np.sqrt(1.0 / p)


def read_sector_map(path, symbols):
    """Sector label per symbol from a (symbol, sector) CSV."""
    with open(path, newline="") as fh:
        mapping = {row["symbol"]: row["sector"] for row in csv.DictReader(fh)}
    missing = [s for s in symbols if s not in mapping]
    if missing:
        raise DomainError(f"no sector for {missing[:5]}")
    return np.array([mapping[s] for s in symbols])


def sparsity_measure(G, delta=0.0):
    """max_j sum_i |G_ij|^delta |G_ii G_jj|^((1 - delta)/2), with 0^0 read as 0."""
    G = np.asarray(G, dtype=float)
    if not 0.0 <= delta < 1.0:
        raise DomainError("delta must lie in [0, 1)")
    d = np.abs(np.diag(G))
    scale = np.outer(d, d) ** ((1.0 - delta) / 2.0)
    mag = (G != 0).astype(float) if delta == 0 else np.abs(G) ** delta
    return float((mag * scale).sum(axis=0).max())


# --- forecasts -----------------------------------------------------------

@dataclass
class LargeForecast:
    raw: np.ndarray
    psd: np.ndarray
    factor: np.ndarray


def predict_large(loadings, theta: GarchParams, factor_series: RealizedSeries, sparse, day_state="day"):
    """U H U' + sparse part, both raw and projected onto the PSD cone."""
    H = forecast_next(theta, factor_series, psd=False, day_state=day_state)
    S = sparse.matrix if isinstance(sparse, SparseEstimate) else np.asarray(sparse, dtype=float)
    U = np.asarray(loadings, dtype=float)
    raw = U @ H @ U.T + S
    raw = 0.5 * (raw + raw.T)
    return LargeForecast(raw, project_psd(raw), H)


def relative_frobenius(M, truth):
    """p^-1/2 || truth^-1/2 M truth^-1/2 ||_F."""
    lam, vecs = np.linalg.eigh(0.5 * (truth + truth.T))
    if lam[0] <= 0:
        raise DomainError("reference matrix must be positive definite")
    inv_half = (vecs / np.sqrt(lam)) @ vecs.T
    p = truth.shape[0]
    return float(np.linalg.norm(inv_half @ M @ inv_half, "fro") / np.sqrt(p))


def subspace_cosines(estimate, truth):
    """Cosine of the angle between each estimated column and the true column span."""
    Q, _ = np.linalg.qr(np.asarray(truth, dtype=float))
    E = np.asarray(estimate, dtype=float)
    E = E / np.linalg.norm(E, axis=0)
    return np.linalg.norm(Q.T @ E, axis=0)


class FactorMOGI(BaseEstimator):
    """Loadings, factor-level fit and idiosyncratic part in one estimator.

    ``fit`` takes a p-dimensional :class:`RealizedSeries`; ``predict`` returns
    the PSD forecast for the day after the series it is given.
    """

    def __init__(self, n_factors=None, r_max=None, threshold=None, rule="soft", m=None,
                 burn_in=BURN_IN, n_starts=6, seed=0, sectors=None):
        self.n_factors = n_factors
        self.r_max = r_max
        self.threshold = threshold
        self.rule = rule
        self.m = m
        self.burn_in = burn_in
        self.n_starts = n_starts
        self.seed = seed
        self.sectors = sectors

    def fit(self, X: RealizedSeries, y=None):
        if self.n_factors is None:
            m = self.m or X.meta.get("m")
            if m is None:
                raise DomainError("m is needed to select the rank")
            r_max = default_r_max(X.p) if self.r_max is None else min(self.r_max, X.p)
            self.rank_ = select_rank(X.rv, r_max, m)
        else:
            self.rank_ = int(self.n_factors)
        self.loadings_ = estimate_loadings(X.rv, self.rank_)
        self.factor_ = project_factor(X.rv, X.overnight, self.loadings_, X.tau, self.rank_)
        self.fit_result_ = fit_wlse_factor(self.factor_, burn_in=self.burn_in, n_starts=self.n_starts,
                                           seed=self.seed)
        thr = simulation_threshold(X.p, X.n) if self.threshold is None else self.threshold
        self.sparse_ = poet_idiosyncratic(X.rv, X.overnight, self.rank_, thr, self.rule, self.sectors)
        return self

    def factor_series(self, X: RealizedSeries):
        return project_factor(X.rv, X.overnight, self.loadings_, X.tau, self.rank_).series()

    def predict(self, X: RealizedSeries, psd=True):
        out = predict_large(self.loadings_, self.fit_result_.theta, self.factor_series(X), self.sparse_)
        return out.psd if psd else out.raw

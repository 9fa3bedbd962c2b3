"""Realized covariance from noisy intraday prices.

The pre-averaging estimator (PRVM) smooths increments over windows of
length w before forming cross products, then subtracts a bias term built
from squared weight differences.
"""

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_matrix_stack, check_tau, check_vector
from .exceptions import DomainError
from .kernels import unvech, vech, vech_length

PHI = 1.0 / 12.0
TRUNCATION_CONSTANT = 2.19


def weight_min(x):
    return np.minimum(x, 1.0 - x)


def weight_max(x):
    return np.maximum(x, 1.0 - x)


WEIGHTS = {"min": weight_min, "max": weight_max}


def _resolve_weight(g):
    if callable(g):
        return g
    try:
        return WEIGHTS[g]
    except KeyError:
        raise DomainError(f"unknown weight function {g!r}") from None


def default_window(m):
    return max(int(np.floor(np.sqrt(m))), 2)


def _prepare(panel, w, g):
    X = np.asarray(panel, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    m = X.shape[0] - 1
    w = default_window(m) if w is None else int(w)
    if w < 2:
        raise DomainError("window must be at least 2")
    if m < w:
        raise DomainError(f"need at least w={w} increments, got m={m}")
    g = _resolve_weight(g)
    d = np.diff(X, axis=0)
    s = np.arange(1, w + 1)
    bar_w = g(s[:-1] / w)
    hat_w = (g(s / w) - g((s - 1) / w)) ** 2
    n_blocks = m - w + 1
    # bar[u-1] = sum_{s=1}^{w-1} g(s/w) d[u+s-1] (zero-based increments)
    bar = np.zeros((n_blocks, X.shape[1]))
    for k, c in enumerate(bar_w, start=1):
        bar += c * d[k:k + n_blocks]
    return d, w, bar, hat_w, n_blocks


def prvm(panel, w=None, g="min", phi=PHI):
    """Pre-averaged realized covariance of an (m + 1, p) log-price panel."""
    d, w, bar, hat_w, n_blocks = _prepare(panel, w, g)
    m = d.shape[0]
    # each increment appears in the bias sum once per block whose window covers it
    counts = np.zeros(m)
    for k, c in enumerate(hat_w):
        counts[k:k + n_blocks] += c
    hat_total = (d * counts[:, None]).T @ d
    out = (bar.T @ bar - 0.5 * hat_total) / (w * phi)
    return 0.5 * (out + out.T)


def truncation_levels(bar, constant=TRUNCATION_CONSTANT):
    return constant * np.sqrt(np.mean(bar ** 2, axis=0))


def jump_truncated_prvm(panel, w=None, g="min", phi=PHI, constant=TRUNCATION_CONSTANT):
    """PRVM with each block dropped for asset i when |bar X^i| exceeds its level."""
    d, w, bar, hat_w, n_blocks = _prepare(panel, w, g)
    keep = (np.abs(bar) < truncation_levels(bar, constant)).astype(float)
    kb = bar * keep
    hat_total = np.zeros((d.shape[1], d.shape[1]))
    for k, c in enumerate(hat_w):
        seg = d[k:k + n_blocks] * keep
        hat_total += c * seg.T @ seg
    out = (kb.T @ kb - 0.5 * hat_total) / (w * phi)
    return 0.5 * (out + out.T)


def overnight_outer(x_close, x_next_open, mu=None, tau=None):
    """Overnight return net of drift and its outer product."""
    x_close = check_vector(x_close, "x_close")
    x_next_open = check_vector(x_next_open, "x_next_open", x_close.size)
    r = x_next_open - x_close
    if mu is not None:
        if tau is None:
            raise DomainError("tau is needed to remove the drift")
        r = r - (1.0 - check_tau(tau)) * check_vector(mu, "mu", x_close.size)
    return r, np.outer(r, r)


def previous_tick_sync(streams, grid):
    """Sample each (timestamps, prices) stream at ``grid`` with last-tick-before semantics."""
    grid = np.asarray(grid, dtype=float)
    out = np.empty((grid.size, len(streams)))
    for j, (ts, px) in enumerate(streams):
        ts = np.asarray(ts, dtype=float)
        px = np.asarray(px, dtype=float)
        if ts.size == 0:
            raise DomainError(f"stream {j} is empty")
        if ts.size != px.size:
            raise DomainError(f"stream {j} has mismatched timestamps and prices")
        if np.any(np.diff(ts) <= 0):
            raise DomainError(f"stream {j} timestamps must be strictly increasing")
        if np.any(px <= 0):
            raise DomainError(f"stream {j} prices must be positive")
        if ts[0] > grid[0]:
            raise DomainError(f"stream {j} has no tick at or before the first grid time")
        idx = np.searchsorted(ts, grid, side="right") - 1
        out[:, j] = px[idx]
    return out


def read_tick_csv(path):
    """Read a (timestamp, symbol, price) CSV into {symbol: (timestamps, prices)}."""
    data = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            data.setdefault(row["symbol"], ([], []))
            data[row["symbol"]][0].append(float(row["timestamp"]))
            data[row["symbol"]][1].append(float(row["price"]))
    return {k: (np.array(t), np.array(p)) for k, (t, p) in data.items()}


@dataclass
class RealizedSeries:
    """Daily realized covariances and raw overnight returns.

    ``rv[k]`` estimates the open-to-close integrated volatility of day k + 1
    and ``overnight[k]`` is X(k + 1) - X(k + tau), the close-to-open return
    that follows it. Drift is removed on demand by :meth:`returns`.
    """

    rv: np.ndarray
    overnight: np.ndarray
    tau: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rv = check_matrix_stack(self.rv, "rv")
        self.rv = 0.5 * (self.rv + self.rv.transpose(0, 2, 1))
        self.overnight = np.asarray(self.overnight, dtype=float)
        if self.overnight.shape != self.rv.shape[:2]:
            raise DomainError("overnight returns must have shape (n, p)")
        if not np.all(np.isfinite(self.overnight)):
            raise DomainError("overnight returns have non-finite entries")
        self.tau = check_tau(self.tau)

    @property
    def n(self):
        return self.rv.shape[0]

    @property
    def p(self):
        return self.rv.shape[1]

    def returns(self, mu=None):
        if mu is None:
            return self.overnight
        return self.overnight - (1.0 - self.tau) * np.asarray(mu, dtype=float)

    def outer(self, mu=None):
        r = self.returns(mu)
        return r[:, :, None] * r[:, None, :]

    def slice(self, start=None, stop=None):
        return replace(self, rv=self.rv[start:stop], overnight=self.overnight[start:stop],
                       meta=dict(self.meta))

    def to_csv(self, path):
        """Columnar file: day, vech(RV) entries, overnight return entries."""
        p = self.p
        q = vech_length(p)
        header = ["day"] + [f"rv_{i}" for i in range(q)] + [f"r_{i}" for i in range(p)]
        rows = np.column_stack([np.arange(1, self.n + 1), vech(self.rv), self.overnight])
        Path(path).write_text(",".join(header) + "\n")
        with open(path, "a") as fh:
            np.savetxt(fh, rows, delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path, tau):
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        q = sum(h.startswith("rv_") for h in header)
        p = sum(h.startswith("r_") for h in header)
        if vech_length(p) != q:
            raise DomainError("column counts are inconsistent")
        days = rows[:, 0]
        if np.any(np.diff(days) != 1):
            raise DomainError("day indices must be contiguous")
        return cls(unvech(rows[:, 1:1 + q]), rows[:, 1 + q:], tau)


def realize(panels, tau, w=None, g="min", truncate=False, constant=TRUNCATION_CONSTANT):
    """Turn a sequence of day panels into a :class:`RealizedSeries`."""
    est = RealizedCovariance(window=w, weight=g, truncate=truncate, constant=constant, tau=tau)
    return est.transform(panels)


class RealizedCovariance(BaseEstimator, TransformerMixin):
    """Transformer from day panels to a :class:`RealizedSeries`."""

    def __init__(self, window=None, weight="min", truncate=False,
                 constant=TRUNCATION_CONSTANT, tau=6.5 / 24):
        self.window = window
        self.weight = weight
        self.truncate = truncate
        self.constant = constant
        self.tau = tau

    def fit(self, X, y=None):
        return self

    def transform_day(self, panel):
        if self.truncate:
            return jump_truncated_prvm(panel.prices, self.window, self.weight, constant=self.constant)
        return prvm(panel.prices, self.window, self.weight)

    def transform(self, X):
        panels = list(X)
        if not panels:
            raise DomainError("no panels given")
        rv = np.stack([self.transform_day(d) for d in panels])
        r = np.stack([d.overnight_return for d in panels])
        m = panels[0].m
        meta = dict(m=m, window=self.window or default_window(m), weight=str(self.weight),
                    truncated=bool(self.truncate))
        return RealizedSeries(rv, r, self.tau, meta)

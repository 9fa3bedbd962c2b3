"""Vectorization algebra and the matrix power series used by the model.

``vec`` stacks columns (column-major). ``vech`` keeps the lower triangle
column by column, so for p = 3 the order is (11, 21, 31, 22, 32, 33).
"""

from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial

import numpy as np

from .exceptions import DomainError

SERIES_TOL = 1e-15
SERIES_MAX_TERMS = 64


def kron(A, B):
    """Kronecker product, so that ``kron(A, B) @ vec(X) == vec(B @ X @ A.T)``."""
    return np.kron(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def vec(M):
    return np.asarray(M, dtype=float).reshape(-1, order="F")


def unvec(v, p=None):
    v = np.asarray(v, dtype=float)
    if p is None:
        p = int(round(np.sqrt(v.shape[-1])))
    if p * p != v.shape[-1]:
        raise DomainError(f"length {v.shape[-1]} is not a perfect square")
    return v.reshape(v.shape[:-1] + (p, p), order="F")


def vech_length(p):
    return p * (p + 1) // 2


def dim_from_vech(q):
    p = int(round((np.sqrt(8 * q + 1) - 1) / 2))
    if vech_length(p) != q:
        raise DomainError(f"length {q} is not a triangular number")
    return p


@lru_cache(maxsize=None)
def _tril_indices(p):
    rows, cols = [], []
    for j in range(p):
        for i in range(j, p):
            rows.append(i)
            cols.append(j)
    rows = np.array(rows, dtype=np.intp)
    cols = np.array(cols, dtype=np.intp)
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


@lru_cache(maxsize=None)
def vech_positions(p):
    """Positions in ``vec`` space of the entries kept by ``vech``."""
    rows, cols = _tril_indices(p)
    pos = rows + cols * p
    pos.flags.writeable = False
    return pos


def vech(M):
    """Half-vectorize a matrix or a stack of matrices along the last two axes."""
    M = np.asarray(M, dtype=float)
    rows, cols = _tril_indices(M.shape[-1])
    return M[..., rows, cols]


def unvech(v, symmetric=True):
    """Inverse of :func:`vech`.

    With ``symmetric=False`` the result is lower triangular, which is how the
    ARCH and GARCH loading matrices are stored.
    """
    v = np.asarray(v, dtype=float)
    p = dim_from_vech(v.shape[-1])
    rows, cols = _tril_indices(p)
    M = np.zeros(v.shape[:-1] + (p, p))
    M[..., rows, cols] = v
    if symmetric:
        M[..., cols, rows] = v
    return M


@dataclass(frozen=True)
class VecIndexMaps:
    """Elimination (vec to vech) and duplication (vech to vec) matrices."""

    p: int
    elimination: np.ndarray = field(init=False, repr=False)
    duplication: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = self.p
        if p < 1:
            raise DomainError("dimension must be positive")
        q = vech_length(p)
        rows, cols = _tril_indices(p)
        L = np.zeros((q, p * p))
        D = np.zeros((p * p, q))
        for k, (i, j) in enumerate(zip(rows, cols)):
            L[k, i + j * p] = 1.0
            D[i + j * p, k] = 1.0
            D[j + i * p, k] = 1.0
        object.__setattr__(self, "elimination", L)
        object.__setattr__(self, "duplication", D)

    @property
    def vec_length(self):
        return self.p * self.p

    @property
    def vech_length(self):
        return vech_length(self.p)


def spectral_norm(M):
    return float(np.linalg.norm(M, 2))


def varrho_series(B, check=True):
    """Return the three series sum_k B^k/(k+j)! for j = 1, 2, 3.

    Summation is direct, so B = 0 and singular B need no special handling.
    Stops once the current power's contribution drops below 1e-15 in norm,
    or after 64 terms.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise DomainError("varrho_series needs a square matrix")
    if check and spectral_norm(B) >= 1.0:
        raise DomainError("varrho_series requires spectral norm below one")
    n = B.shape[0]
    r1 = np.zeros((n, n))
    r2 = np.zeros((n, n))
    r3 = np.zeros((n, n))
    power = np.eye(n)
    for k in range(SERIES_MAX_TERMS):
        f1 = factorial(k + 1)
        r1 += power / f1
        r2 += power / (f1 * (k + 2))
        r3 += power / (f1 * (k + 2) * (k + 3))
        if np.abs(power).max() / f1 < SERIES_TOL:
            break
        power = power @ B
    return r1, r2, r3

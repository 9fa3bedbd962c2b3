"""Input checks shared by the public entry points."""

import numpy as np

from .exceptions import DomainError


def check_square(M, name="matrix", dim=None):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] == 0:
        raise DomainError(f"{name} must be a non-empty square matrix, got shape {M.shape}")
    if dim is not None and M.shape[0] != dim:
        raise DomainError(f"{name} must be {dim}x{dim}, got {M.shape[0]}x{M.shape[0]}")
    if not np.all(np.isfinite(M)):
        raise DomainError(f"{name} has non-finite entries")
    return M


def check_symmetric(M, name="matrix", dim=None, rtol=1e-12):
    """Validate a symmetric matrix and return its exactly symmetrized copy."""
    M = check_square(M, name, dim)
    scale = max(np.abs(M).max(), 1e-300)
    if np.abs(M - M.T).max() > rtol * scale:
        raise DomainError(f"{name} is not symmetric")
    return 0.5 * (M + M.T)


def check_psd(M, name="matrix", tol=1e-10):
    M = check_symmetric(M, name, rtol=1e-8)
    lam_min = np.linalg.eigvalsh(M)[0]
    if lam_min < -tol * max(np.trace(np.abs(M)), 1.0):
        raise DomainError(f"{name} is not positive semidefinite (min eigenvalue {lam_min:.3e})")
    return M


def check_vector(v, name="vector", dim=None):
    v = np.asarray(v, dtype=float).reshape(-1)
    if dim is not None and v.size != dim:
        raise DomainError(f"{name} must have length {dim}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} has non-finite entries")
    return v


def check_tau(tau):
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise DomainError(f"open-period fraction must lie in (0, 1), got {tau}")
    return tau


def check_positive_int(x, name):
    if int(x) != x or x < 1:
        raise DomainError(f"{name} must be a positive integer, got {x}")
    return int(x)


def check_matrix_stack(X, name="matrix stack", dim=None):
    """Validate an (n, p, p) array of symmetric matrices."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 3 or X.shape[1] != X.shape[2] or X.shape[0] == 0:
        raise DomainError(f"{name} must have shape (n, p, p), got {X.shape}")
    if dim is not None and X.shape[1] != dim:
        raise DomainError(f"{name} must hold {dim}x{dim} matrices")
    if not np.all(np.isfinite(X)):
        raise DomainError(f"{name} has non-finite entries")
    return X

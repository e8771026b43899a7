"""Small dense symmetric kernels: eigendecomposition, PSD solves, Kronecker products."""

from typing import NamedTuple

import numpy as np
import scipy.linalg

from laplace_kit.errors import InvalidMatrix, NotPositiveDefinite

SYMMETRY_RTOL = 1e-10
JITTER_SCALE = 1e-10
MAX_JITTER_DOUBLINGS = 8


class SymEig(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self):
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def as_matrix(m, name="matrix"):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidMatrix(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidMatrix(f"{name} has non-finite entries")
    return arr


def _check_symmetric(m):
    if m.shape[0] != m.shape[1]:
        raise InvalidMatrix(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if m.size and np.max(np.abs(m - m.T)) > SYMMETRY_RTOL * scale:
        raise InvalidMatrix("matrix is not symmetric")


def sym_eig(m):
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""
    m = as_matrix(m)
    _check_symmetric(m)
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return SymEig(vals, vecs)


def kron(a, b):
    return np.kron(as_matrix(a, "a"), as_matrix(b, "b"))


def _cholesky_with_jitter(m):
    m = as_matrix(m)
    _check_symmetric(m)
    n = m.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    try:
        return scipy.linalg.cholesky(m, lower=True)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_SCALE * max(abs(np.trace(m)), 1e-300) / n
    eye = np.eye(n)
    for _ in range(MAX_JITTER_DOUBLINGS + 1):
        try:
            return scipy.linalg.cholesky(m + jitter * eye, lower=True)
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise NotPositiveDefinite("matrix is not positive definite after maximum jitter")


def psd_solve(m, rhs):
    """Solve ``m @ x = rhs`` for symmetric positive definite ``m``."""
    chol = _cholesky_with_jitter(m)
    rhs = np.asarray(rhs, dtype=np.float64)
    return scipy.linalg.cho_solve((chol, True), rhs)


def psd_inverse(m):
    m = as_matrix(m)
    return psd_solve(m, np.eye(m.shape[0]))


def logdet_psd(m):
    chol = _cholesky_with_jitter(m)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))

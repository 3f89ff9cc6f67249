"""Small dense symmetric linear-algebra kernel.

All matrices in this package are real symmetric with dimension up to a few
hundred, so a dense symmetric eigendecomposition is the single factorization
primitive and O(d^3) routines are acceptable. Inputs are validated at module
boundaries; the functions themselves are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYM_TOL = 1e-12       # relative symmetry tolerance
ORTHO_TOL = 1e-10     # orthonormality tolerance for supplied bases
RANK_TOL = 1e-10      # eigenvalues <= RANK_TOL * lambda_max count as kernel
IMAGE_TOL = 1e-9      # relative size of kernel component tolerated by min_norm_solve


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass
class NotInImage:
    """Right-hand side has a non-trivial kernel component; no solution exists.

    ``residual`` is the projection of the right-hand side onto the kernel.
    """

    residual: np.ndarray


def as_vec(x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a vector, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ValueError(f"expected dimension {dim}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("vector has non-finite entries")
    return x


def as_sym_matrix(a) -> np.ndarray:
    """Validate a dense symmetric matrix (symmetry to 1e-12 relative)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric to tolerance")
    return 0.5 * (a + a.T)


def psd_from_spectrum(eigenvalues, basis) -> np.ndarray:
    """Assemble sum_i lambda_i v_i v_i^T from a nonnegative spectrum.

    ``basis`` holds the d orthonormal vectors as rows or as a list of vectors.
    """
    vs = np.asarray(basis, dtype=float)
    if vs.ndim != 2 or vs.shape[0] != vs.shape[1]:
        raise ValueError("basis must contain d vectors of dimension d")
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.ndim != 1 or lam.shape[0] != vs.shape[0]:
        raise ValueError("need one eigenvalue per basis vector")
    if np.any(lam < 0):
        raise ValueError("negative eigenvalue")
    gram = vs @ vs.T
    if np.max(np.abs(gram - np.eye(vs.shape[0]))) > ORTHO_TOL:
        raise ValueError("basis is not orthonormal to tolerance")
    a = (vs.T * lam) @ vs
    return 0.5 * (a + a.T)


def contraction_power(a, eta: float, k: int) -> np.ndarray:
    """Return (I - eta*A)^K by repeated squaring; symmetric output.

    The caller typically forms C = I - result, the per-round contraction map
    of K local gradient steps on a quadratic with Hessian A.
    """
    a = as_sym_matrix(a)
    if eta <= 0:
        raise ValueError("eta must be positive")
    k = int(k)
    if k < 1:
        raise ValueError("K must be a positive integer")
    base = np.eye(a.shape[0]) - eta * a
    out = np.eye(a.shape[0])
    while k:
        if k & 1:
            out = out @ base
        base = base @ base
        k >>= 1
    return 0.5 * (out + out.T)


def eigen_extremes(a) -> tuple[float, float]:
    """Extreme eigenvalues (lambda_min, lambda_max) of a symmetric matrix."""
    a = as_sym_matrix(a)
    w = np.linalg.eigvalsh(a)
    return float(w[0]), float(w[-1])


def operator_norm(a) -> float:
    lo, hi = eigen_extremes(a)
    return max(abs(lo), abs(hi))


def solve_spd(c, b) -> np.ndarray:
    """Solve Cx = b for symmetric positive definite C.

    Raises NotPositiveDefiniteError when the smallest eigenvalue is below
    RANK_TOL times the largest.
    """
    c = as_sym_matrix(c)
    b = as_vec(b, c.shape[0])
    w, v = np.linalg.eigh(c)
    if w[-1] <= 0 or w[0] <= RANK_TOL * w[-1]:
        raise NotPositiveDefiniteError("matrix is not positive definite to tolerance")
    return v @ ((v.T @ b) / w)


def min_norm_solve(c, rhs) -> np.ndarray | NotInImage:
    """Minimum-norm solution of Cx = rhs for PSD C, or NotInImage.

    Eigendirections with lambda <= RANK_TOL * lambda_max are treated as the
    kernel. If the kernel component of ``rhs`` exceeds IMAGE_TOL * ||rhs||,
    the system has no solution and the kernel component is returned instead.
    """
    c = as_sym_matrix(c)
    rhs = as_vec(rhs, c.shape[0])
    w, v = np.linalg.eigh(c)
    if w[-1] <= 0:
        # zero (or negative-roundoff) matrix: image is {0}
        if np.linalg.norm(rhs) <= IMAGE_TOL:
            return np.zeros_like(rhs)
        return NotInImage(residual=rhs.copy())
    live = w > RANK_TOL * w[-1]
    coeff = v.T @ rhs
    kernel_part = v[:, ~live] @ coeff[~live]
    if np.linalg.norm(kernel_part) > IMAGE_TOL * np.linalg.norm(rhs):
        return NotInImage(residual=kernel_part)
    x = v[:, live] @ (coeff[live] / w[live])
    return x

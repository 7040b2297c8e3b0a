"""Shared linear-algebra helpers: pseudo-inverses and PSD certification."""

import numpy as np

# Singular values below PINV_RCOND * sigma_max are treated as zero everywhere a
# generalized inverse is taken.  Conjugate estimates are invariant to the choice
# of generalized inverse, so the cutoff only affects reported coefficients.
PINV_RCOND = 1e-12


def pinv(a: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with the package-wide singular value cutoff.

    ``scale`` anchors the cutoff when the matrix is a product that is zero in
    exact arithmetic (e.g. a normal matrix over directions a covariance
    structure annihilates): singular values below ``PINV_RCOND * scale`` are
    float residue, not signal, and are dropped rather than inverted.
    """
    a = np.asarray(a, dtype=float)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = PINV_RCOND * max(s[0] if s.size else 0.0, scale or 0.0)
    inv = np.zeros_like(s)
    keep = s > cutoff
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


def pinv_solve(
    a: np.ndarray, b: np.ndarray, scale: float | None = None
) -> tuple[np.ndarray, bool]:
    """Solve ``a @ x = b`` in the least-squares sense via an SVD pseudo-inverse.

    Returns the minimum-norm solution and a flag that is True when ``a`` was
    rank deficient at the cutoff (duplicated columns, empty arm, ...).
    ``scale`` has the same role as in :func:`pinv`.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = PINV_RCOND * max(s[0] if s.size else 0.0, scale or 0.0)
    keep = s > cutoff
    ub = u[:, keep].T @ b
    if b.ndim == 1:
        x = vt[keep].T @ (ub / s[keep])
    else:
        x = vt[keep].T @ (ub / s[keep][:, None])
    return x, bool((~keep).any())


def product_scale(left: np.ndarray, right: np.ndarray) -> float:
    """Frobenius upper bound on the norm of ``left @ right`` (cutoff anchor)."""
    return float(np.linalg.norm(left) * np.linalg.norm(right))


def symmetrize(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def sym_eigvals(a: np.ndarray) -> np.ndarray:
    """Eigenvalues of the symmetrized matrix, ascending."""
    return np.linalg.eigvalsh(symmetrize(np.asarray(a, dtype=float)))


def min_max_eig(a: np.ndarray) -> tuple[float, float]:
    vals = sym_eigvals(a)
    if vals.size == 0:
        return 0.0, 0.0
    return float(vals[0]), float(vals[-1])


def spectral_norm(a: np.ndarray) -> float:
    lo, hi = min_max_eig(a)
    return max(abs(lo), abs(hi))


def is_psd(a: np.ndarray, tol: float = 1e-8) -> bool:
    """Certify positive semidefiniteness up to ``-tol * spectral norm``."""
    lo, hi = min_max_eig(a)
    scale = max(abs(lo), abs(hi), 1.0)
    return lo >= -tol * scale


def psd_project(a: np.ndarray) -> np.ndarray:
    """Project a symmetric matrix onto the PSD cone by clipping eigenvalues."""
    vals, vecs = np.linalg.eigh(symmetrize(a))
    clipped = np.clip(vals, 0.0, None)
    return (vecs * clipped) @ vecs.T

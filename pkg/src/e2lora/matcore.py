"""Deterministic dense linear algebra primitives.

Everything in this module operates on 2-D float64 arrays and is
bit-reproducible for identical inputs: the SVD uses a one-sided Jacobi
iteration with a fixed column-pair sweep order, orthonormalization uses
modified Gram-Schmidt with one reorthogonalization pass, and Gaussian
sampling draws from a seeded generator.

Sign convention for singular vectors: the largest-magnitude entry of each
left singular vector is non-negative, ties broken by lowest row index.
This makes every downstream basis byte-reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConvergenceError,
    NumericalError,
    RankDeficiencyError,
    ValidationError,
)

__all__ = [
    "SvdResult",
    "as_matrix",
    "thin_svd",
    "orthonormalize",
    "orthonormal_complement",
    "gaussian_sample",
]

# Relative threshold below which a column-pair inner product counts as
# annihilated, and the sweep cap as a multiple of the column count.
_JACOBI_TOL = 1e-15
_SWEEP_CAP_FACTOR = 100

# Pivot ratio below which orthonormalize declares rank deficiency.
_PIVOT_RTOL = 1e-12

# Default ridge added to covariances before Cholesky factorization.
COV_RIDGE = 1e-4


def as_matrix(m, name="matrix", min_rows=1, min_cols=1):
    """Coerce to a 2-D float64 array, rejecting bad shapes and non-finite
    entries with a ValidationError."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.shape[0] < min_rows or a.shape[1] < min_cols:
        raise ValidationError(
            f"{name} must be at least {min_rows}x{min_cols}, got {a.shape}"
        )
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ v.T``.

    u : (d, k) with orthonormal columns
    sigma : (k,) non-negative, non-increasing
    v : (n, k) with orthonormal columns
    where k = min(d, n).
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def _pivoted_orthonormal(candidates, count, against=None):
    """Greedy pivoted Gram-Schmidt: pick `count` orthonormal columns from
    `candidates`, each orthogonal to `against` and to columns picked so far.

    At every step the remaining candidate with the largest residual norm is
    taken (ties broken by lowest candidate index), which is deterministic
    and robust for any candidate set that spans the target subspace.
    """
    dim = candidates.shape[0]
    work = candidates.astype(np.float64, copy=True)
    if against is not None and against.shape[1] > 0:
        for _ in range(2):
            work -= against @ (against.T @ work)
    picked = np.empty((dim, count), dtype=np.float64)
    used = np.zeros(work.shape[1], dtype=bool)
    for out in range(count):
        norms = np.linalg.norm(work, axis=0)
        norms[used] = -1.0
        best = int(np.argmax(norms))
        if norms[best] <= 1e-10:
            raise RankDeficiencyError(
                "candidate set does not span the requested subspace"
            )
        col = work[:, best] / norms[best]
        # One extra projection pass keeps orthogonality near machine eps.
        if against is not None and against.shape[1] > 0:
            col -= against @ (against.T @ col)
        if out > 0:
            col -= picked[:, :out] @ (picked[:, :out].T @ col)
        col /= np.linalg.norm(col)
        picked[:, out] = col
        used[best] = True
        work -= np.outer(col, col @ work)
    return picked


def orthonormal_complement(basis, count):
    """Return `count` orthonormal columns spanning part of the orthogonal
    complement of `basis` (d x q, orthonormal columns, q possibly 0).

    Deterministic: candidates are the standard basis vectors, taken by
    greedy residual-norm pivoting.
    """
    dim = basis.shape[0]
    if basis.shape[1] + count > dim:
        raise ValidationError(
            f"complement of width {count} does not fit: "
            f"{basis.shape[1]} + {count} > {dim}"
        )
    if count == 0:
        return np.zeros((dim, 0))
    return _pivoted_orthonormal(np.eye(dim), count, against=basis)


def _apply_sign_convention(u, v):
    """Flip column signs in-place so each u column's largest-magnitude entry
    is non-negative (first index wins ties); v columns flip in tandem."""
    for j in range(u.shape[1]):
        idx = int(np.argmax(np.abs(u[:, j])))
        if u[idx, j] < 0.0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]


def thin_svd(m):
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Parameters
    ----------
    m : array_like, shape (d, n)
        Real matrix with finite entries.

    Returns
    -------
    SvdResult
        With k = min(d, n) columns in u and v. Columns of u follow the
        module sign convention; sigma is non-increasing. Exactly-zero
        singular directions get deterministically completed orthonormal
        u columns so u.T @ u = I always holds.

    Raises
    ------
    ValidationError
        On non-finite input.
    ConvergenceError
        If the sweep cap (100 x columns) is reached before all column
        pairs are annihilated.
    """
    a = as_matrix(m, "svd input")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    d, n = a.shape

    w = a.astype(np.float64, copy=True)
    v = np.eye(n)
    max_sweeps = _SWEEP_CAP_FACTOR * n
    worst = 0.0
    converged = False
    for _ in range(max_sweeps):
        rotated = False
        worst = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi = w[:, i]
                wj = w[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                scale = np.sqrt(alpha * beta)
                if scale == 0.0:
                    continue
                ratio = abs(gamma) / scale
                worst = max(worst, ratio)
                if ratio <= _JACOBI_TOL:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * wi - s * wj
                new_j = s * wi + c * wj
                w[:, i] = new_i
                w[:, j] = new_j
                vi = v[:, i].copy()
                vj = v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"one-sided Jacobi SVD did not converge in {max_sweeps} sweeps",
            residual=worst,
        )

    norms = np.linalg.norm(w, axis=0)
    order = np.argsort(-norms, kind="stable")
    w = w[:, order]
    v = v[:, order]
    sigma = norms[order]

    # Normalize columns with meaningful mass; complete the rest so the left
    # factor stays orthonormal even for rank-deficient input.
    u = np.empty((d, n))
    cutoff = d * np.finfo(np.float64).eps * sigma[0] if sigma[0] > 0 else 0.0
    kept = 0
    for j in range(n):
        if sigma[j] > cutoff:
            u[:, j] = w[:, j] / sigma[j]
            kept = j + 1
    if kept < n:
        u[:, kept:] = _pivoted_orthonormal(np.eye(d), n - kept, against=u[:, :kept])

    if transposed:
        u, v = v, u
    _apply_sign_convention(u, v)
    return SvdResult(u=_readonly(u), sigma=_readonly(sigma), v=_readonly(v))


def orthonormalize(m):
    """Orthonormalize the columns of a tall matrix.

    Modified Gram-Schmidt with a second projection pass; returns q with
    q.T @ q = I and span(q) = span(m). Raises RankDeficiencyError when any
    pivot falls below 1e-12 times the leading pivot, and ValidationError
    when rows < cols.
    """
    a = as_matrix(m, "orthonormalize input")
    rows, cols = a.shape
    if rows < cols:
        raise ValidationError(f"need rows >= cols, got {a.shape}")
    q = a.astype(np.float64, copy=True)
    leading = None
    for j in range(cols):
        for _ in range(2):
            for i in range(j):
                q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        pivot = np.linalg.norm(q[:, j])
        if leading is None:
            leading = pivot
        if pivot <= _PIVOT_RTOL * leading or pivot == 0.0:
            raise RankDeficiencyError(
                f"column {j} pivot {pivot:.3e} below "
                f"{_PIVOT_RTOL:.0e} x leading pivot {leading:.3e}"
            )
        q[:, j] /= pivot
    return q


def gaussian_sample(mu, cov, count, seed, ridge=COV_RIDGE):
    """Draw `count` samples from N(mu, cov + ridge * I).

    Parameters
    ----------
    mu : array_like, shape (dim,)
    cov : array_like, shape (dim, dim)
        Must be symmetric within 1e-8.
    count : int
    seed : int
        Seeds a fresh generator, so identical arguments give identical
        samples.
    ridge : float
        Added to the diagonal before Cholesky so degenerate covariances
        stay factorable.

    Returns
    -------
    ndarray, shape (count, dim)
    """
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 1:
        raise ValidationError(f"mu must be 1-D, got ndim={mu.ndim}")
    c = as_matrix(cov, "covariance")
    dim = mu.shape[0]
    if c.shape != (dim, dim):
        raise ValidationError(f"covariance shape {c.shape} does not match mu ({dim},)")
    if count < 0:
        raise ValidationError(f"count must be non-negative, got {count}")
    if np.max(np.abs(c - c.T), initial=0.0) > 1e-8:
        raise ValidationError("covariance is not symmetric within 1e-8")
    ridged = c + ridge * np.eye(dim)
    try:
        chol = np.linalg.cholesky(ridged)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance factorization failed: {exc}") from exc
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, dim))
    return mu + z @ chol.T

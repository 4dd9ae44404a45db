"""Low-rank adapter pairs and the energy-ordered reparameterization.

An adapter is a factored update ``delta = b @ a`` with b (d_out x r) and
a (r x d_in). After a task is trained, the adapter is rewritten in the
left singular basis of its output drift ``b @ a @ x`` over a small proxy
batch, which sorts the r rank components by how much output change they
carry. Truncating trailing components is then optimal in the sense that
the empirical squared output error equals the discarded tail energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import matcore
from .errors import StateError, ValidationError

__all__ = [
    "LoraPair",
    "DriftSpectrum",
    "ProxyBatch",
    "delta",
    "output_drift",
    "energy_transform",
    "truncate",
    "merged_forward",
]

# Singular values at or below this fraction of the largest are treated as
# zero when deciding how many drift directions actually carry energy.
_ZERO_SIGMA_RTOL = 1e-12

# Gram deviation above this means a pair was never energy-transformed.
_TRANSFORMED_ATOL = 1e-6


@dataclass(frozen=True)
class LoraPair:
    """One task's adapter: ``delta = b @ a`` of rank ``b.shape[1]``.

    b always has orthonormal columns in this package (random orthonormal at
    birth, a left singular basis after consolidation); only a is ever
    trained. rank 0 is legal and means a zero update.
    """

    task_id: int
    b: np.ndarray
    a: np.ndarray
    b_frozen: bool = True

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        if b.ndim != 2 or a.ndim != 2:
            raise ValidationError("b and a must be 2-D")
        if b.shape[1] != a.shape[0]:
            raise ValidationError(
                f"rank mismatch: b is {b.shape}, a is {a.shape}"
            )
        if b.shape[1] > b.shape[0]:
            raise ValidationError(
                f"rank {b.shape[1]} exceeds output dim {b.shape[0]}"
            )
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
            raise ValidationError("adapter matrices contain non-finite entries")
        object.__setattr__(self, "b", matcore._readonly(b))
        object.__setattr__(self, "a", matcore._readonly(a))

    @property
    def rank(self):
        return self.b.shape[1]

    @property
    def d_out(self):
        return self.b.shape[0]

    @property
    def d_in(self):
        return self.a.shape[1]


@dataclass(frozen=True)
class DriftSpectrum:
    """Left singular basis and singular values of one task's output drift.

    u is the task's orthonormal output basis (d_out x r) and sigma its
    non-increasing singular values, padded with zeros when the adapter rank
    exceeds the drift rank. The right factor of the decomposition is only
    needed during the transform and is not stored.
    """

    task_id: int
    u: np.ndarray
    sigma: np.ndarray
    proxy_count: int

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if u.ndim != 2 or sigma.ndim != 1 or u.shape[1] != sigma.shape[0]:
            raise ValidationError(
                f"basis/spectrum mismatch: u is {u.shape}, sigma has {sigma.shape}"
            )
        if np.any(sigma < 0) or np.any(np.diff(sigma) > 0):
            raise ValidationError("sigma must be non-negative and non-increasing")
        if u.shape[1] > 0:
            gram = u.T @ u
            if np.max(np.abs(gram - np.eye(u.shape[1]))) > 1e-8:
                raise ValidationError("u columns are not orthonormal within 1e-8")
        object.__setattr__(self, "u", matcore._readonly(u))
        object.__setattr__(self, "sigma", matcore._readonly(sigma))

    @property
    def rank(self):
        return self.sigma.shape[0]


@dataclass(frozen=True)
class ProxyBatch:
    """Layer-input activations used to estimate a task's output drift.

    features has one column per sample (d_in x n).
    """

    features: np.ndarray
    source_task: int
    n: int = field(init=False)

    def __post_init__(self):
        f = matcore.as_matrix(self.features, "proxy features")
        object.__setattr__(self, "features", matcore._readonly(f))
        object.__setattr__(self, "n", f.shape[1])


def delta(pair):
    """Materialize the weight update ``b @ a`` (d_out x d_in)."""
    if pair.rank == 0:
        return np.zeros((pair.d_out, pair.d_in))
    return pair.b @ pair.a


def output_drift(pair, x):
    """Output change the adapter induces on a proxy batch: ``b @ a @ X``
    with shape (d_out, n)."""
    if x.features.shape[0] != pair.d_in:
        raise ValidationError(
            f"proxy feature dim {x.features.shape[0]} does not match "
            f"adapter input dim {pair.d_in}"
        )
    if pair.rank == 0:
        return np.zeros((pair.d_out, x.n))
    return pair.b @ (pair.a @ x.features)


def energy_transform(pair, x):
    """Rewrite an adapter in the singular basis of its output drift.

    Computes the drift d_y = b @ a @ X, its thin SVD d_y = u s v.T, and
    returns a new pair with b' the leading r columns of u and
    a' = b'.T @ b @ a, where r is the adapter's rank. When the drift has
    fewer than r nonzero singular values, the missing b' columns are
    completed orthonormally inside span(b) and the matching a' rows are
    exactly zero, so the product on the proxy batch is preserved and the
    new basis stays inside the task's own subspace.

    Returns
    -------
    (LoraPair, DriftSpectrum)
        The reparameterized pair (b_frozen=True) and its spectrum: the
        singular values of the drift truncated to length r (zero-padded
        when the drift rank is below r).
    """
    dy = output_drift(pair, x)
    r = pair.rank
    if r == 0:
        raise ValidationError("cannot transform a rank-0 adapter")
    res = matcore.thin_svd(dy)
    k = res.sigma.shape[0]

    if res.sigma[0] > 0:
        lead = int(np.sum(res.sigma > _ZERO_SIGMA_RTOL * res.sigma[0]))
    else:
        lead = 0
    lead = min(lead, r)

    sigma = np.zeros(r)
    take = min(r, k)
    sigma[:take] = res.sigma[:take]

    u_lead = res.u[:, :lead]
    if lead < r:
        # Complete inside the task's own subspace so bases of different
        # tasks stay mutually orthogonal.
        residual = pair.b - u_lead @ (u_lead.T @ pair.b)
        extra = matcore._pivoted_orthonormal(residual, r - lead, against=u_lead)
        b_new = np.hstack([u_lead, extra])
    else:
        b_new = u_lead.copy()

    a_new = np.zeros((r, pair.d_in))
    if lead > 0:
        a_new[:lead] = u_lead.T @ (pair.b @ pair.a)

    new_pair = LoraPair(pair.task_id, b_new, a_new, b_frozen=True)
    spectrum = DriftSpectrum(pair.task_id, b_new, sigma, proxy_count=x.n)
    return new_pair, spectrum


def truncate(pair, spectrum, r_keep):
    """Keep the leading r_keep rank components of a transformed pair.

    Returns (pruned pair, released basis columns, pruned spectrum). The
    released columns are the trailing b columns, handed back for reuse by
    the rank allocator. Requires b to have orthonormal columns (i.e. the
    pair was energy-transformed); otherwise raises StateError.
    """
    if r_keep < 0 or r_keep > pair.rank:
        raise ValidationError(
            f"r_keep {r_keep} outside [0, {pair.rank}]"
        )
    if pair.rank > 0:
        gram = pair.b.T @ pair.b
        if np.max(np.abs(gram - np.eye(pair.rank))) > _TRANSFORMED_ATOL:
            raise StateError("pair is not energy-transformed (b not orthonormal)")
    if spectrum.rank != pair.rank or spectrum.task_id != pair.task_id:
        raise ValidationError("spectrum does not belong to this pair")
    pruned = LoraPair(
        pair.task_id, pair.b[:, :r_keep], pair.a[:r_keep, :], b_frozen=True
    )
    released = pair.b[:, r_keep:].copy()
    pruned_spec = DriftSpectrum(
        spectrum.task_id,
        spectrum.u[:, :r_keep],
        spectrum.sigma[:r_keep],
        spectrum.proxy_count,
    )
    return pruned, released, pruned_spec


def merged_forward(base, pairs, x):
    """Apply the base weight plus every adapter update to a vector:
    ``(W0 + sum_t b_t a_t) @ x``."""
    w = matcore.as_matrix(base, "base weight")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != w.shape[1]:
        raise ValidationError(
            f"input dim {x.shape[0]} does not match base cols {w.shape[1]}"
        )
    y = w @ x
    for pair in pairs:
        if pair.d_out != w.shape[0] or pair.d_in != w.shape[1]:
            raise ValidationError(
                f"pair for task {pair.task_id} has shape "
                f"({pair.d_out}, {pair.d_in}), base is {w.shape}"
            )
        if pair.rank > 0:
            y = y + pair.b @ (pair.a @ x)
    return y

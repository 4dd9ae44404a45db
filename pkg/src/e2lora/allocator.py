"""Dynamic rank allocation over a shared output-dimension budget.

The d_out output directions of a layer form a capacity pool shared by all
tasks. Before a new task starts, each old task is pruned down to the
smallest leading-rank count that keeps a fraction rho of its drift energy
(sum of squared singular values). If that frees less than the new task's
minimum budget ceil(d_out / t), the globally lowest-energy retained ranks
are removed one at a time until it does. The new task then receives every
free direction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import lora, matcore
from .errors import StateError, ValidationError

__all__ = [
    "AllocConfig",
    "PoolEntry",
    "CapacityPool",
    "AllocationPlan",
    "retained_rank_for",
    "min_rank",
    "plan_allocation",
    "apply_plan",
    "init_new_task",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AllocConfig:
    """Energy retention threshold rho in (0, 1) and an optional cap on the
    first task's rank (defaults to the full pool)."""

    rho: float = 0.9999
    first_task_rank_cap: int | None = None

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ValidationError(f"rho must be in (0, 1), got {self.rho}")
        if self.first_task_rank_cap is not None and self.first_task_rank_cap < 1:
            raise ValidationError("first_task_rank_cap must be >= 1")


@dataclass(frozen=True)
class PoolEntry:
    """One task's slice of the pool: its currently retained rank and the
    full singular value list recorded at consolidation time (the list is
    never re-truncated; retained_rank just shrinks)."""

    task_id: int
    retained_rank: int
    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim != 1:
            raise ValidationError("sigma must be 1-D")
        if np.any(sigma < 0) or np.any(np.diff(sigma) > 0):
            raise ValidationError("sigma must be non-negative and non-increasing")
        if not (0 <= self.retained_rank <= sigma.shape[0]):
            raise ValidationError(
                f"retained rank {self.retained_rank} outside sigma length "
                f"{sigma.shape[0]}"
            )
        object.__setattr__(self, "sigma", matcore._readonly(sigma))


@dataclass
class CapacityPool:
    """Per-layer ledger of retained ranks, bounded by d_out in total."""

    d_out: int
    entries: list[PoolEntry] = field(default_factory=list)

    def total_retained(self):
        return sum(e.retained_rank for e in self.entries)

    def validate(self):
        if self.d_out < 1:
            raise StateError(f"pool d_out must be >= 1, got {self.d_out}")
        if self.total_retained() > self.d_out:
            raise StateError(
                f"pool overcommitted: {self.total_retained()} > {self.d_out}"
            )

    def with_ranks(self, keep_ranks):
        """New pool with retained ranks replaced according to a plan."""
        entries = [
            PoolEntry(e.task_id, keep_ranks[e.task_id], e.sigma)
            for e in self.entries
        ]
        return CapacityPool(self.d_out, entries)

    def add_task(self, task_id, rank, sigma):
        self.entries.append(PoolEntry(task_id, rank, sigma))
        self.validate()


@dataclass(frozen=True)
class AllocationPlan:
    """Outcome of planning one task's arrival: how many ranks each old task
    keeps, the new task's rank, and structured decision records with
    reason in {threshold, uniform-fallback}."""

    keep_ranks: dict
    new_task_rank: int
    new_task_id: int
    records: tuple = ()


def retained_rank_for(sigma, rho):
    """Smallest r whose leading squared singular values reach a fraction
    rho of the total; 0 for an all-zero spectrum."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValidationError("sigma entries must be non-negative")
    if np.any(np.diff(sigma) > 0):
        raise ValidationError("sigma must be non-increasing")
    energy = sigma * sigma
    total = float(energy.sum())
    if total == 0.0:
        return 0
    cumulative = np.cumsum(energy)
    return int(np.searchsorted(cumulative, rho * total) + 1)


def min_rank(d_out, t):
    """Minimum rank budget for the t-th task: ceil(d_out / t)."""
    if t < 1:
        raise ValidationError(f"task index must be >= 1, got {t}")
    return -(-d_out // t)


def plan_allocation(pool, new_task_id, cfg):
    """Plan capacity for an arriving task.

    Phase 1 prunes each old task to its rho-threshold rank (never above its
    current retained rank). Phase 2, if the freed capacity is below the new
    task's minimum budget, repeatedly removes the single globally smallest
    retained squared singular value (ties: older task first, then lower
    rank index) until the budget is met or all old ranks are gone. The new
    task receives all remaining free capacity.
    """
    pool.validate()
    if new_task_id != len(pool.entries) + 1:
        raise ValidationError(
            f"new_task_id {new_task_id} does not follow "
            f"{len(pool.entries)} existing entries"
        )
    t = new_task_id
    keep = {}
    records = []
    for entry in pool.entries:
        threshold_rank = retained_rank_for(entry.sigma, cfg.rho)
        kept = min(threshold_rank, entry.retained_rank)
        keep[entry.task_id] = kept
        records.append(
            {
                "task_id": entry.task_id,
                "kept": kept,
                "freed": entry.retained_rank - kept,
                "reason": "threshold",
            }
        )

    need = min_rank(pool.d_out, t)
    free = pool.d_out - sum(keep.values())
    while free < need and any(k > 0 for k in keep.values()):
        best = None
        for entry in pool.entries:
            k = keep[entry.task_id]
            if k == 0:
                continue
            candidate = (float(entry.sigma[k - 1]) ** 2, entry.task_id, k - 1)
            if best is None or candidate < best:
                best = candidate
        _, victim, index = best
        keep[victim] -= 1
        free += 1
        records.append(
            {
                "task_id": victim,
                "kept": keep[victim],
                "freed": 1,
                "rank_index": index,
                "reason": "uniform-fallback",
            }
        )
    if free < need:
        log.warning(
            "minimum rank budget %d unreachable for task %d; granting %d",
            need,
            t,
            max(1, free),
        )

    new_rank = pool.d_out - sum(keep.values())
    if t == 1 and cfg.first_task_rank_cap is not None:
        new_rank = min(new_rank, cfg.first_task_rank_cap)
    new_rank = max(1, new_rank)
    return AllocationPlan(keep, new_rank, t, tuple(records))


def apply_plan(pairs, spectra, plan):
    """Truncate each old pair to its planned rank and assemble the new
    task's basis.

    Returns (pruned pairs, freed_basis, pruned spectra). freed_basis
    concatenates all released columns in task order and, when the pool was
    not previously full, is padded with deterministic orthonormal columns
    from the complement of every retained basis so no capacity sits idle.
    """
    if len(pairs) != len(spectra):
        raise ValidationError("pairs and spectra lists differ in length")
    for pair, spec in zip(pairs, spectra):
        if pair.task_id != spec.task_id:
            raise ValidationError(
                f"pair task {pair.task_id} does not match spectrum task "
                f"{spec.task_id}"
            )
        if pair.task_id not in plan.keep_ranks:
            raise ValidationError(f"plan has no entry for task {pair.task_id}")
    if len(pairs) != len(plan.keep_ranks):
        raise ValidationError("plan covers a different task set")

    pruned = []
    pruned_spectra = []
    released_blocks = []
    for pair, spec in zip(pairs, spectra):
        new_pair, released, new_spec = lora.truncate(
            pair, spec, plan.keep_ranks[pair.task_id]
        )
        pruned.append(new_pair)
        pruned_spectra.append(new_spec)
        released_blocks.append(released)

    if pruned:
        d_out = pruned[0].d_out
    elif released_blocks:
        d_out = released_blocks[0].shape[0]
    else:
        raise ValidationError("apply_plan needs at least one existing pair")

    freed = (
        np.hstack(released_blocks)
        if released_blocks
        else np.zeros((d_out, 0))
    )
    if freed.shape[1] > plan.new_task_rank:
        raise StateError(
            f"released {freed.shape[1]} columns but plan grants "
            f"{plan.new_task_rank}"
        )
    if freed.shape[1] < plan.new_task_rank:
        retained_cols = [p.b for p in pruned if p.rank > 0] + [freed]
        against = np.hstack(retained_cols)
        pad = matcore.orthonormal_complement(
            against, plan.new_task_rank - freed.shape[1]
        )
        freed = np.hstack([freed, pad])
    return pruned, freed, pruned_spectra


def init_new_task(freed_basis, d_in, task_id):
    """Wrap a freed orthonormal basis into a fresh adapter with a = 0."""
    basis = matcore.as_matrix(freed_basis, "freed basis", min_cols=0)
    if basis.shape[1] == 0:
        raise ValidationError(
            "new task received an empty basis (allocator bug: rank must be >= 1)"
        )
    gram = basis.T @ basis
    if np.max(np.abs(gram - np.eye(basis.shape[1]))) > 1e-6:
        raise ValidationError("freed basis columns are not orthonormal")
    a = np.zeros((basis.shape[1], d_in))
    return lora.LoraPair(task_id, basis, a, b_frozen=True)

"""Brute-force validators for the package's core guarantees.

Every check recomputes its measured side through plain matrix products and
enumeration, never through the transform or SVD machinery it validates.
The suite runners at the bottom define the seeded instance grids the CLI
`verify` subcommand executes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import matcore
from .allocator import AllocConfig, CapacityPool, PoolEntry, plan_allocation
from .errors import ValidationError
from .lora import LoraPair, ProxyBatch, energy_transform

__all__ = [
    "OracleReport",
    "check_truncation_identity",
    "check_rank_optimality",
    "check_cross_task_orthogonality",
    "check_uniform_pruning",
    "run_truncation_suite",
    "run_optimality_suite",
    "run_orthogonality_suite",
    "run_pruning_suite",
    "run_gradient_suite",
    "SUITES",
]


@dataclass(frozen=True)
class OracleReport:
    """One check outcome; passes when the measured value matches the
    reference within tolerance * max(1, |reference|)."""

    name: str
    instance: dict
    measured: float
    reference: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        ok = abs(self.measured - self.reference) <= self.tolerance * max(
            1.0, abs(self.reference)
        )
        object.__setattr__(self, "passed", bool(ok))

    def to_dict(self):
        return {
            "name": self.name,
            "instance": self.instance,
            "measured": self.measured,
            "reference": self.reference,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _proxy_error(dw_full, dw_small, feats):
    """Column-by-column squared output error of a reduced update."""
    total = 0.0
    for j in range(feats.shape[1]):
        diff = dw_full @ feats[:, j] - dw_small @ feats[:, j]
        total += float(diff @ diff)
    return total


def check_truncation_identity(pair, spectrum, x, r_keep, tolerance=1e-6):
    """Empirical truncated output error vs the spectrum's tail energy.

    measured sums ||(delta - delta_truncated) x_j||^2 over proxy columns
    through naive per-column products; reference is the sum of squared
    singular values past r_keep.
    """
    if x.features.shape[0] != pair.d_in:
        raise ValidationError("proxy batch does not match the pair")
    if spectrum.proxy_count != x.n or spectrum.task_id != pair.task_id:
        raise ValidationError("spectrum was not computed against this proxy batch")
    if not (0 <= r_keep <= pair.rank):
        raise ValidationError(f"r_keep {r_keep} outside [0, {pair.rank}]")
    dw_full = pair.b @ pair.a
    dw_small = pair.b[:, :r_keep] @ pair.a[:r_keep, :]
    measured = _proxy_error(dw_full, dw_small, np.asarray(x.features))
    reference = float(np.sum(spectrum.sigma[r_keep:] ** 2))
    return OracleReport(
        "truncation_identity",
        {"d_out": pair.d_out, "d_in": pair.d_in, "rank": pair.rank,
         "n": x.n, "r_keep": r_keep},
        measured,
        reference,
        tolerance,
    )


def check_rank_optimality(pair, x, r_keep, trials, seed, tolerance=1e-9):
    """Randomized search for a rank-r_keep update beating the truncation.

    Candidates mix random factored updates, random orthogonal projections
    of the full update, and perturbations of the truncated solution.
    measured is the largest margin by which any candidate undercuts the
    truncated update's proxy error (clamped at 0), so passing means no
    candidate won beyond the tie tolerance.
    """
    if pair.d_out > 8 or x.n > 16:
        raise ValidationError("optimality check is restricted to d_out <= 8, n <= 16")
    feats = np.asarray(x.features)
    dw_full = pair.b @ pair.a
    dw_trunc = pair.b[:, :r_keep] @ pair.a[:r_keep, :]
    err_trunc = _proxy_error(dw_full, dw_trunc, feats)
    rng = np.random.default_rng(seed)
    best_margin = 0.0
    for trial in range(trials):
        kind = trial % 3
        if kind == 0 or r_keep == 0:
            bt = rng.standard_normal((pair.d_out, r_keep))
            at = rng.standard_normal((r_keep, pair.d_in))
            cand = bt @ at
        elif kind == 1:
            q = matcore.orthonormalize(rng.standard_normal((pair.d_out, r_keep)))
            cand = q @ (q.T @ dw_full)
        else:
            eta = 10.0 ** rng.uniform(-6.0, -1.0)
            bt = pair.b[:, :r_keep] + eta * rng.standard_normal(
                (pair.d_out, r_keep)
            )
            at = pair.a[:r_keep, :] + eta * rng.standard_normal(
                (r_keep, pair.d_in)
            )
            cand = bt @ at
        err_cand = _proxy_error(dw_full, cand, feats)
        best_margin = max(best_margin, err_trunc - err_cand)
    return OracleReport(
        "rank_optimality",
        {"d_out": pair.d_out, "d_in": pair.d_in, "rank": pair.rank,
         "n": x.n, "r_keep": r_keep, "trials": trials, "seed": seed},
        best_margin,
        0.0,
        tolerance,
    )


def check_cross_task_orthogonality(pairs, new_pair=None, tolerance=1e-8):
    """Gram-matrix deviation of all stacked adapter bases from identity."""
    blocks = [p.b for p in pairs if p.rank > 0]
    if new_pair is not None and new_pair.rank > 0:
        blocks.append(new_pair.b)
    if not blocks:
        raise ValidationError("need at least one non-empty pair")
    stacked = np.hstack(blocks)
    gram = stacked.T @ stacked
    measured = float(np.max(np.abs(gram - np.eye(gram.shape[0]))))
    return OracleReport(
        "cross_task_orthogonality",
        {"columns": int(stacked.shape[1]), "d_out": int(stacked.shape[0])},
        measured,
        0.0,
        tolerance,
    )


def check_uniform_pruning(pool, plan, tolerance=1e-12):
    """Exhaustively verify the fallback removals were globally minimal.

    Reconstructs the post-threshold state from the plan's records,
    enumerates every way to remove the same number of trailing ranks
    across tasks, and compares total removed energy (and the removed
    multiset) against the plan's choice. Instances above 12 total
    retained ranks are skipped with a note.
    """
    start = {}
    removed = []
    for rec in plan.records:
        if rec["reason"] == "threshold":
            start[rec["task_id"]] = rec["kept"]
        elif rec["reason"] == "uniform-fallback":
            entry = next(e for e in pool.entries if e.task_id == rec["task_id"])
            removed.append(float(entry.sigma[rec["rank_index"]]) ** 2)
    total_start = sum(start.values())
    if total_start > 12:
        return OracleReport(
            "uniform_pruning",
            {"skipped": f"instance too large ({total_start} retained ranks)"},
            0.0,
            0.0,
            tolerance,
        )
    m = len(removed)
    if m == 0:
        return OracleReport(
            "uniform_pruning", {"removals": 0}, 0.0, 0.0, tolerance
        )

    tasks = [e for e in pool.entries if e.task_id in start]
    caps = [start[e.task_id] for e in tasks]
    best_sum = None
    best_multisets = []
    for combo in itertools.product(*(range(c + 1) for c in caps)):
        if sum(combo) != m:
            continue
        values = []
        for entry, s in zip(tasks, combo):
            k = start[entry.task_id]
            values.extend(float(v) ** 2 for v in entry.sigma[k - s : k])
        total = sum(values)
        if best_sum is None or total < best_sum - 1e-15:
            best_sum = total
            best_multisets = [sorted(values)]
        elif abs(total - best_sum) <= 1e-15:
            best_multisets.append(sorted(values))

    plan_sum = sum(removed)
    sum_gap = abs(plan_sum - best_sum)
    multiset_ok = any(
        np.allclose(sorted(removed), ms, rtol=0, atol=1e-12)
        for ms in best_multisets
    )
    measured = sum_gap if multiset_ok else max(sum_gap, 1.0)
    return OracleReport(
        "uniform_pruning",
        {"removals": m, "retained_ranks": total_start},
        measured,
        0.0,
        tolerance,
    )


# ---------------------------------------------------------------------------
# Seeded instance grids driven by the CLI verify subcommand.


def _random_transformed_pair(d_out, d_in, rank, n, seed):
    rng = np.random.default_rng(seed)
    basis = matcore.orthonormalize(rng.standard_normal((d_out, rank)))
    a = rng.standard_normal((rank, d_in))
    pair = LoraPair(task_id=1, b=basis, a=a)
    x = ProxyBatch(rng.standard_normal((d_in, n)), source_task=1)
    new_pair, spectrum = energy_transform(pair, x)
    return new_pair, spectrum, x


def _truncation_grid():
    combos = [
        (d_out, d_in, r, n)
        for d_out in (4, 16, 64)
        for d_in in (8, 32)
        for r in (2, 4, 8)
        for n in (10, 50)
        if r <= d_out
    ]
    return combos[:20]


def run_truncation_suite():
    """Tail-energy identity on the 20-instance grid, every r_keep."""
    reports = []
    for seed, (d_out, d_in, rank, n) in enumerate(_truncation_grid()):
        pair, spectrum, x = _random_transformed_pair(d_out, d_in, rank, n, seed)
        for r_keep in range(rank + 1):
            reports.append(check_truncation_identity(pair, spectrum, x, r_keep))
    return reports


def run_optimality_suite(trials=500):
    """Randomized rank-truncation optimality on 10 small instances."""
    grid = [
        (6, 4, 4, 10, 2),
        (8, 8, 4, 16, 2),
        (4, 8, 3, 12, 1),
        (8, 4, 4, 10, 3),
        (6, 6, 5, 16, 2),
        (8, 16, 6, 16, 3),
        (5, 5, 4, 8, 2),
        (7, 9, 5, 14, 2),
        (8, 12, 8, 16, 4),
        (6, 10, 4, 12, 1),
    ]
    reports = []
    for seed, (d_out, d_in, rank, n, r_keep) in enumerate(grid, start=100):
        pair, _, x = _random_transformed_pair(d_out, d_in, rank, n, seed)
        reports.append(
            check_rank_optimality(pair, x, r_keep, trials=trials, seed=seed + 1)
        )
    return reports


def run_orthogonality_suite(inject_bug=False):
    """Per-task basis orthogonality across a short seeded continual run.

    With inject_bug=True a deliberately corrupted instance (one duplicated
    basis column) is appended; it must fail, guarding against a vacuous
    check.
    """
    from . import bench
    from .trainer import TrainConfig

    stream = bench.make_synthetic_stream(
        num_tasks=6,
        classes_per_task=2,
        feature_dim=16,
        separation=8.0,
        seed=5,
        samples_per_class=40,
    )
    reports = []

    def audit(t, model, pools):
        for li, layer in enumerate(model.layers):
            rep = check_cross_task_orthogonality(layer.pairs)
            reports.append(
                OracleReport(
                    rep.name,
                    {**rep.instance, "task": t, "layer": li},
                    rep.measured,
                    rep.reference,
                    rep.tolerance,
                )
            )

    bench.run_continual(
        stream,
        "e2lora",
        train_cfg=TrainConfig(epochs=3, seed=5),
        hidden_dim=32,
        out_dim=32,
        task_callback=audit,
    )
    if inject_bug:
        rng = np.random.default_rng(0)
        basis = matcore.orthonormalize(rng.standard_normal((8, 3)))
        corrupted = basis.copy()
        corrupted[:, 2] = corrupted[:, 1]
        bad = LoraPair(task_id=1, b=corrupted, a=np.zeros((3, 4)))
        rep = check_cross_task_orthogonality([bad])
        reports.append(
            OracleReport(
                rep.name,
                {**rep.instance, "negative_control": True},
                rep.measured,
                rep.reference,
                rep.tolerance,
            )
        )
    return reports


def run_pruning_suite():
    """Exhaustive fallback-minimality checks on small seeded pools."""
    reports = []
    cases = [
        # (d_out, retained ranks per task, seed) with rho high enough that
        # phase 1 keeps everything, so the min-rank budget forces fallback.
        (12, (4, 4, 4), 11),
        (10, (3, 4, 3), 12),
        (8, (2, 3, 3), 13),
        (12, (6, 6), 14),
        (9, (3, 3, 3), 15),
    ]
    for d_out, ranks, seed in cases:
        rng = np.random.default_rng(seed)
        entries = []
        for k, r in enumerate(ranks, start=1):
            sigma = np.sort(rng.uniform(0.5, 5.0, size=r))[::-1]
            entries.append(PoolEntry(k, r, sigma))
        pool = CapacityPool(d_out, entries)
        plan = plan_allocation(pool, len(ranks) + 1, AllocConfig(rho=0.999999))
        reports.append(check_uniform_pruning(pool, plan))
    # Tie case: equal smallest energies, older task must lose first.
    pool = CapacityPool(
        4, [PoolEntry(1, 2, np.array([3.0, 1.0])), PoolEntry(2, 2, np.array([3.0, 1.0]))]
    )
    plan = plan_allocation(pool, 3, AllocConfig(rho=0.999999))
    reports.append(check_uniform_pruning(pool, plan))
    fallback = [r for r in plan.records if r["reason"] == "uniform-fallback"]
    tie_ok = bool(fallback) and fallback[0]["task_id"] == 1
    reports.append(
        OracleReport(
            "uniform_pruning_tiebreak",
            {"case": "equal smallest energies"},
            0.0 if tie_ok else 1.0,
            0.0,
            1e-12,
        )
    )
    return reports


def run_gradient_suite():
    """Analytic-vs-finite-difference gradient deviations on small models."""
    from .trainer import (
        ClassPartition,
        ContinualModel,
        TrainConfig,
        analytic_gradient_check,
    )
    from .allocator import init_new_task

    reports = []
    for seed in range(5):
        for weight in (0.0, 0.2):
            rng = np.random.default_rng([seed, 9])
            model = ContinualModel.random(5, 6, 7, seed=seed)
            for layer in model.layers:
                basis = matcore.orthonormalize(
                    rng.standard_normal((layer.d_out, 2))
                )
                pair = init_new_task(basis, layer.d_in, task_id=1)
                # Non-zero adapter so the loss surface is generic.
                layer.pairs.append(
                    LoraPair(1, pair.b, 0.3 * rng.standard_normal(pair.a.shape))
                )
            model.add_classes([0, 1, 2, 3])
            partition = ClassPartition((0, 1), (2, 3))
            x = rng.standard_normal((6, 5))
            y = rng.integers(2, 4, size=6)
            cfg = TrainConfig(seed=seed, distill_weight=weight)
            dev = analytic_gradient_check(model, (x, y), partition, cfg)
            reports.append(
                OracleReport(
                    "gradient_check",
                    {"seed": seed, "distill_weight": weight},
                    dev,
                    0.0,
                    1e-4,
                )
            )
    return reports


SUITES = {
    "truncation": run_truncation_suite,
    "optimality": run_optimality_suite,
    "orthogonality": run_orthogonality_suite,
    "pruning": run_pruning_suite,
    "gradients": run_gradient_suite,
}

"""Synthetic continual-learning streams, metrics, and run strategies.

Streams are seeded Gaussian class clusters; class-incremental tasks carry
disjoint class sets, domain-incremental tasks share one class set whose
means are rotated per domain. Three strategies are runnable: the full
energy-ordered method, a naive shared-adapter baseline that forgets, and
joint training on pooled data as the upper-bound reference.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import matcore
from .align import AlignConfig, align_classifier, estimate_stats
from .allocator import (
    AllocConfig,
    CapacityPool,
    apply_plan,
    init_new_task,
    plan_allocation,
    retained_rank_for,
)
from .errors import ValidationError
from .lora import energy_transform
from .trainer import (
    ClassPartition,
    ContinualModel,
    TrainConfig,
    collect_proxy_features,
    train_task,
)

__all__ = [
    "TaskData",
    "TaskStream",
    "MetricsReport",
    "RunResult",
    "make_synthetic_stream",
    "evaluate",
    "run_continual",
    "energy_curve",
    "STRATEGIES",
]

STRATEGIES = ("e2lora", "naive_lora", "joint")

CLASS_INCREMENTAL = "class-incremental"
DOMAIN_INCREMENTAL = "domain-incremental"


@dataclass(frozen=True)
class TaskData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_ids: tuple
    domain_id: int


@dataclass(frozen=True)
class TaskStream:
    mode: str
    tasks: tuple
    feature_dim: int
    total_classes: int
    seed: int
    classes_per_task: int


@dataclass(frozen=True)
class MetricsReport:
    """Per-step accuracies (percent) after each task, with their final
    value and exact mean."""

    per_step: tuple
    last_acc: float = field(init=False)
    inc_acc: float = field(init=False)

    def __post_init__(self):
        steps = tuple(float(a) for a in self.per_step)
        if not steps:
            raise ValidationError("empty accuracy sequence")
        if any(a < 0 or a > 100 for a in steps):
            raise ValidationError("accuracies must lie in [0, 100]")
        object.__setattr__(self, "per_step", steps)
        object.__setattr__(self, "last_acc", steps[-1])
        object.__setattr__(self, "inc_acc", sum(steps) / len(steps))


@dataclass
class RunResult:
    strategy: str
    report: MetricsReport
    spectra: list = field(default_factory=list)  # (task, layer, DriftSpectrum)
    train_records: list = field(default_factory=list)
    plan_records: list = field(default_factory=list)
    # Final live state, populated by the e2lora strategy for checkpointing.
    pools: dict = None
    stats: dict = None
    live_spectra: dict = None


def make_synthetic_stream(
    num_tasks,
    classes_per_task,
    feature_dim,
    separation,
    seed,
    mode=CLASS_INCREMENTAL,
    samples_per_class=100,
):
    """Seeded Gaussian task stream.

    Class-incremental: each class is a unit-covariance cluster whose mean
    sits on a sphere of radius `separation`; class sets are disjoint across
    tasks. Domain-incremental: one shared class set whose means get a
    seeded orthogonal rotation per task. Every class is split 80/20 into
    train/test.
    """
    if num_tasks < 1 or classes_per_task < 2:
        raise ValidationError("need num_tasks >= 1 and classes_per_task >= 2")
    if mode not in (CLASS_INCREMENTAL, DOMAIN_INCREMENTAL):
        raise ValidationError(f"unknown stream mode {mode!r}")
    if samples_per_class < 5:
        raise ValidationError("need at least 5 samples per class for the 80/20 split")
    rng = np.random.default_rng(seed)

    def sphere_point():
        v = rng.standard_normal(feature_dim)
        return separation * v / np.linalg.norm(v)

    def make_cluster(mean):
        pts = mean + rng.standard_normal((samples_per_class, feature_dim))
        n_train = int(round(0.8 * samples_per_class))
        perm = rng.permutation(samples_per_class)
        return pts[perm[:n_train]], pts[perm[n_train:]]

    tasks = []
    if mode == CLASS_INCREMENTAL:
        total = num_tasks * classes_per_task
        for t in range(num_tasks):
            ids = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
            tr_x, tr_y, te_x, te_y = [], [], [], []
            for c in ids:
                tr, te = make_cluster(sphere_point())
                tr_x.append(tr)
                te_x.append(te)
                tr_y.append(np.full(len(tr), c))
                te_y.append(np.full(len(te), c))
            tasks.append(
                TaskData(
                    np.vstack(tr_x),
                    np.concatenate(tr_y),
                    np.vstack(te_x),
                    np.concatenate(te_y),
                    ids,
                    domain_id=t,
                )
            )
    else:
        total = classes_per_task
        base_means = [sphere_point() for _ in range(classes_per_task)]
        ids = tuple(range(classes_per_task))
        for t in range(num_tasks):
            if t == 0:
                rot = np.eye(feature_dim)
            else:
                rot = matcore.orthonormalize(
                    rng.standard_normal((feature_dim, feature_dim))
                )
            tr_x, tr_y, te_x, te_y = [], [], [], []
            for c in ids:
                tr, te = make_cluster(rot @ base_means[c])
                tr_x.append(tr)
                te_x.append(te)
                tr_y.append(np.full(len(tr), c))
                te_y.append(np.full(len(te), c))
            tasks.append(
                TaskData(
                    np.vstack(tr_x),
                    np.concatenate(tr_y),
                    np.vstack(te_x),
                    np.concatenate(te_y),
                    ids,
                    domain_id=t,
                )
            )
    return TaskStream(
        mode=mode,
        tasks=tuple(tasks),
        feature_dim=feature_dim,
        total_classes=total,
        seed=seed,
        classes_per_task=classes_per_task,
    )


def _dil_row_ids(stream, task_index):
    """Model-side class ids of one domain's classifier head."""
    c = stream.classes_per_task
    return tuple(task_index * c + k for k in range(c))


def task_model_classes(stream, task_index):
    """Class ids a task contributes to the model's classifier."""
    if stream.mode == CLASS_INCREMENTAL:
        return tuple(int(c) for c in stream.tasks[task_index].class_ids)
    return _dil_row_ids(stream, task_index)


def task_model_labels(stream, task_index, labels):
    """Map a task's raw labels to model-side class ids."""
    if stream.mode == CLASS_INCREMENTAL:
        return np.asarray(labels, dtype=int)
    return np.asarray(labels, dtype=int) + task_index * stream.classes_per_task


def evaluate(model, stream, upto_task):
    """Accuracy (percent) over the union of test sets of tasks 1..upto_task.

    Class-incremental predictions argmax over every seen class.
    Domain-incremental predictions sum each class's scores across all
    domain heads before the argmax.
    """
    if not (1 <= upto_task <= len(stream.tasks)):
        raise ValidationError(f"upto_task {upto_task} out of range")
    xs = np.vstack([stream.tasks[t].test_x for t in range(upto_task)])
    ys = np.concatenate([stream.tasks[t].test_y for t in range(upto_task)])
    logits = model.logits(xs)
    if stream.mode == CLASS_INCREMENTAL:
        pred = np.asarray(model.class_ids)[np.argmax(logits, axis=1)]
    else:
        c = stream.classes_per_task
        scores = np.zeros((xs.shape[0], c))
        for t in range(upto_task):
            rows = [model.row_of(g) for g in _dil_row_ids(stream, t)]
            scores += logits[:, rows]
        pred = np.argmax(scores, axis=1)
    return float(np.mean(pred == ys) * 100.0)


def _derived_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _full_rank_pairs(model, seed):
    """One full-capacity adapter per layer with a seeded orthonormal basis
    and a = 0 (used for the first task and the baselines)."""
    for li, layer in enumerate(model.layers):
        rng = np.random.default_rng([seed, 101, li])
        basis = matcore.orthonormalize(
            rng.standard_normal((layer.d_out, layer.d_out))
        )
        layer.pairs.append(init_new_task(basis, layer.d_in, task_id=1))


def _run_e2lora(
    stream, train_cfg, alloc_cfg, align_cfg, hidden_dim, out_dim, task_callback=None
):
    model = ContinualModel.random(
        stream.feature_dim, hidden_dim, out_dim, seed=train_cfg.seed
    )
    pools = {li: CapacityPool(layer.d_out) for li, layer in enumerate(model.layers)}
    live_spectra = {li: [] for li in range(len(model.layers))}
    stats_all = {}
    result = RunResult("e2lora", None)
    per_step = []
    seen = []

    for t in range(1, len(stream.tasks) + 1):
        td = stream.tasks[t - 1]
        new_ids = task_model_classes(stream, t - 1)
        partition = ClassPartition(tuple(seen), new_ids)
        model.add_classes(new_ids)

        for li, layer in enumerate(model.layers):
            plan = plan_allocation(pools[li], t, alloc_cfg)
            if t == 1:
                rng = np.random.default_rng([train_cfg.seed, 101, li])
                freed = matcore.orthonormalize(
                    rng.standard_normal((layer.d_out, plan.new_task_rank))
                )
                released = 0
            else:
                pruned, freed, pruned_specs = apply_plan(
                    layer.pairs, live_spectra[li], plan
                )
                released = sum(
                    e.retained_rank - plan.keep_ranks[e.task_id]
                    for e in pools[li].entries
                )
                layer.pairs = pruned
                live_spectra[li] = pruned_specs
                pools[li] = pools[li].with_ranks(plan.keep_ranks)
            for rec in plan.records:
                result.plan_records.append({"task": t, "layer": li, **rec})
            padding = plan.new_task_rank - released
            if padding > 0:
                result.plan_records.append(
                    {
                        "task": t,
                        "layer": li,
                        "task_id": t,
                        "kept": plan.new_task_rank,
                        "freed": 0,
                        "reason": "padding" if t > 1 else "threshold",
                        "padded": padding,
                    }
                )
            layer.pairs.append(init_new_task(freed, layer.d_in, task_id=t))

        labels = task_model_labels(stream, t - 1, td.train_y)
        train_task(model, (td.train_x, labels), partition, train_cfg, log=result.train_records)

        proxies = collect_proxy_features(
            model,
            (td.train_x, labels),
            train_cfg.proxy_count,
            seed=_derived_seed(train_cfg.seed, 3, t),
        )
        for li, layer in enumerate(model.layers):
            pair, spectrum = energy_transform(layer.pairs[-1], proxies[li])
            layer.pairs[-1] = pair
            live_spectra[li].append(spectrum)
            pools[li].add_task(t, spectrum.rank, spectrum.sigma)
            result.spectra.append((t, li, spectrum))

        feats = model.features(td.train_x)
        stats_all.update(estimate_stats(feats, labels))
        align_classifier(
            model,
            stats_all,
            dataclasses.replace(align_cfg, seed=_derived_seed(align_cfg.seed, t)),
        )

        seen.extend(new_ids)
        per_step.append(evaluate(model, stream, t))
        if task_callback is not None:
            task_callback(t, model, pools)

    result.report = MetricsReport(tuple(per_step))
    result.pools = pools
    result.stats = stats_all
    result.live_spectra = live_spectra
    return result, model


def _run_naive(stream, train_cfg, hidden_dim, out_dim):
    model = ContinualModel.random(
        stream.feature_dim, hidden_dim, out_dim, seed=train_cfg.seed
    )
    _full_rank_pairs(model, train_cfg.seed)
    cfg = dataclasses.replace(train_cfg, distill_weight=0.0)
    result = RunResult("naive_lora", None)
    per_step = []
    seen = []
    for t in range(1, len(stream.tasks) + 1):
        td = stream.tasks[t - 1]
        new_ids = task_model_classes(stream, t - 1)
        partition = ClassPartition(tuple(seen), new_ids)
        model.add_classes(new_ids)
        labels = task_model_labels(stream, t - 1, td.train_y)
        train_task(model, (td.train_x, labels), partition, cfg, log=result.train_records)
        seen.extend(new_ids)
        per_step.append(evaluate(model, stream, t))
    result.report = MetricsReport(tuple(per_step))
    return result, model


def _run_joint(stream, train_cfg, hidden_dim, out_dim):
    model = ContinualModel.random(
        stream.feature_dim, hidden_dim, out_dim, seed=train_cfg.seed
    )
    _full_rank_pairs(model, train_cfg.seed)
    cfg = dataclasses.replace(train_cfg, distill_weight=0.0)
    all_ids = []
    xs, ys = [], []
    for t in range(len(stream.tasks)):
        ids = task_model_classes(stream, t)
        all_ids.extend(ids)
        xs.append(stream.tasks[t].train_x)
        ys.append(task_model_labels(stream, t, stream.tasks[t].train_y))
    partition = ClassPartition((), tuple(all_ids))
    model.add_classes(all_ids)
    result = RunResult("joint", None)
    train_task(
        model,
        (np.vstack(xs), np.concatenate(ys)),
        partition,
        cfg,
        log=result.train_records,
    )
    result.report = MetricsReport((evaluate(model, stream, len(stream.tasks)),))
    return result, model


def run_continual(
    stream,
    strategy,
    train_cfg=None,
    alloc_cfg=None,
    align_cfg=None,
    hidden_dim=64,
    out_dim=64,
    return_model=False,
    task_callback=None,
):
    """Run one strategy over a stream and return its RunResult.

    `e2lora` runs the full four-phase loop per task (allocate, train,
    transform, align); `naive_lora` sequentially retrains one shared
    full-capacity adapter with no protection; `joint` trains once on the
    pooled data. For e2lora, task_callback(t, model, pools) fires after
    each task, giving external auditors a look at the live state.
    """
    train_cfg = train_cfg or TrainConfig()
    alloc_cfg = alloc_cfg or AllocConfig()
    align_cfg = align_cfg or AlignConfig()
    if strategy == "e2lora":
        result, model = _run_e2lora(
            stream,
            train_cfg,
            alloc_cfg,
            align_cfg,
            hidden_dim,
            out_dim,
            task_callback=task_callback,
        )
    elif strategy == "naive_lora":
        result, model = _run_naive(stream, train_cfg, hidden_dim, out_dim)
    elif strategy == "joint":
        result, model = _run_joint(stream, train_cfg, hidden_dim, out_dim)
    else:
        raise ValidationError(
            f"unknown strategy {strategy!r}; expected one of {STRATEGIES}"
        )
    if return_model:
        return result, model
    return result


def energy_curve(spectrum):
    """Cumulative energy fraction against rank fraction.

    Point i is (i/r, sum of the leading i squared singular values over the
    total). Non-decreasing and concave for a sorted spectrum, ending at
    (1, 1); an all-zero spectrum yields a flat zero curve with a warning.
    """
    sigma = np.asarray(spectrum.sigma, dtype=np.float64)
    if sigma.size == 0:
        raise ValidationError("empty spectrum")
    energy = sigma * sigma
    total = float(energy.sum())
    r = sigma.size
    if total == 0.0:
        warnings.warn("all-zero spectrum; energy curve is flat", stacklevel=2)
        return [((i + 1) / r, 0.0) for i in range(r)]
    cum = np.cumsum(energy)
    return [((i + 1) / r, float(cum[i] / total)) for i in range(r)]

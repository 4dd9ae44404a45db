"""Per-task optimization of adapters and classifier.

The backbone is a frozen two-layer rectifier network whose linear layers
each carry a stack of adapters. Training a task updates only the current
adapter's a matrices and the classifier: cross-entropy restricted to the
task's new classes, plus (from the second task on) temperature-scaled
distillation that holds the old-class predictions of the adapter-masked
teacher in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matcore
from .errors import DivergenceError, ValidationError
from .lora import LoraPair, ProxyBatch

__all__ = [
    "TrainConfig",
    "ClassPartition",
    "Layer",
    "ContinualModel",
    "distill_loss",
    "ce_loss",
    "total_loss",
    "train_task",
    "analytic_gradient_check",
    "collect_proxy_features",
]


@dataclass(frozen=True)
class TrainConfig:
    lr_lora: float = 0.0005
    lr_classifier: float = 0.01
    epochs: int = 5
    batch_size: int = 64
    distill_weight: float = 0.2
    temperature: float = 2.0
    seed: int = 0
    proxy_count: int = 16

    def __post_init__(self):
        if self.lr_lora <= 0 or self.lr_classifier <= 0:
            raise ValidationError("learning rates must be positive")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.distill_weight < 0:
            raise ValidationError("distillation weight must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.proxy_count < 1:
            raise ValidationError("bad epoch/batch/proxy count")


@dataclass(frozen=True)
class ClassPartition:
    """Disjoint old/new class-id sets covering everything seen so far."""

    old_classes: tuple
    new_classes: tuple

    def __post_init__(self):
        old = tuple(int(c) for c in self.old_classes)
        new = tuple(int(c) for c in self.new_classes)
        if set(old) & set(new):
            raise ValidationError("old and new class sets overlap")
        if not new:
            raise ValidationError("new class set is empty")
        object.__setattr__(self, "old_classes", old)
        object.__setattr__(self, "new_classes", new)


class Layer:
    """One frozen linear layer plus its adapter stack."""

    def __init__(self, weight, bias, pairs=None):
        self.weight = matcore._readonly(matcore.as_matrix(weight, "layer weight"))
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (self.weight.shape[0],):
            raise ValidationError("bias does not match layer output dim")
        self.bias = matcore._readonly(bias)
        self.pairs: list[LoraPair] = list(pairs) if pairs else []

    @property
    def d_out(self):
        return self.weight.shape[0]

    @property
    def d_in(self):
        return self.weight.shape[1]


class ContinualModel:
    """Frozen backbone, per-layer adapter stacks, growing classifier.

    Base weights and biases are read-only arrays; the only mutable state
    is the adapter lists and the classifier.
    """

    def __init__(self, layers):
        if not layers:
            raise ValidationError("model needs at least one layer")
        self.layers = list(layers)
        feat = self.layers[-1].d_out
        self.classifier_w = np.zeros((0, feat))
        self.classifier_b = np.zeros(0)
        self.class_ids: list[int] = []
        self._row = {}

    @classmethod
    def random(cls, d_in, hidden_dim, out_dim, seed):
        """Seeded two-layer rectifier backbone standing in for a frozen
        pretrained feature extractor."""
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((hidden_dim, d_in)) / np.sqrt(d_in)
        w2 = rng.standard_normal((out_dim, hidden_dim)) / np.sqrt(hidden_dim)
        return cls([Layer(w1, np.zeros(hidden_dim)), Layer(w2, np.zeros(out_dim))])

    @property
    def feature_dim(self):
        return self.layers[-1].d_out

    def num_classes(self):
        return len(self.class_ids)

    def row_of(self, class_id):
        return self._row[class_id]

    def add_classes(self, class_ids):
        """Append zero-initialized classifier rows for unseen class ids."""
        fresh = [c for c in class_ids if c not in self._row]
        if not fresh:
            return
        extra = len(fresh)
        self.classifier_w = np.vstack(
            [self.classifier_w, np.zeros((extra, self.feature_dim))]
        )
        self.classifier_b = np.concatenate([self.classifier_b, np.zeros(extra)])
        for c in fresh:
            self._row[c] = len(self.class_ids)
            self.class_ids.append(c)

    def current_task_id(self):
        ids = {p.task_id for layer in self.layers for p in layer.pairs}
        return max(ids) if ids else None

    def _forward(self, x, exclude_task=None, want_cache=False):
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        inputs = []
        preacts = []
        for li, layer in enumerate(self.layers):
            inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            for pair in layer.pairs:
                if exclude_task is not None and pair.task_id == exclude_task:
                    continue
                if pair.rank > 0:
                    z = z + (h @ pair.a.T) @ pair.b.T
            preacts.append(z)
            h = np.maximum(z, 0.0) if li < len(self.layers) - 1 else z
        if want_cache:
            return h, inputs, preacts
        return h

    def features(self, x, exclude_task=None):
        """Backbone output (N, feature_dim)."""
        return self._forward(x, exclude_task=exclude_task)

    def logits(self, x, exclude_task=None):
        f = self.features(x, exclude_task=exclude_task)
        return f @ self.classifier_w.T + self.classifier_b


def _logsumexp(v, axis=-1, keepdims=False):
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def distill_loss(z_tea, z_stu, old_classes, temperature):
    """Temperature-scaled KL between teacher and student on old classes.

    old_classes are positions into the logits vectors. Returns
    T^2 * KL(softmax(z_tea[old]/T) || softmax(z_stu[old]/T)), which is
    zero exactly when the restricted logits agree up to a constant shift.
    """
    old = np.asarray(sorted(old_classes), dtype=int)
    if old.size == 0:
        raise ValidationError("old class set is empty; skip distillation on task 1")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    z_tea = np.asarray(z_tea, dtype=np.float64)
    z_stu = np.asarray(z_stu, dtype=np.float64)
    lt = z_tea[old] / temperature
    ls = z_stu[old] / temperature
    log_pt = lt - _logsumexp(lt)
    log_ps = ls - _logsumexp(ls)
    pt = np.exp(log_pt)
    return float(temperature * temperature * (pt @ (log_pt - log_ps)))


def ce_loss(z_stu, label, new_classes):
    """Cross-entropy of the student restricted to the new classes.

    new_classes are positions into the logits vector; label must be one of
    them. Old-class logits never enter the value.
    """
    new = sorted(new_classes)
    if label not in new:
        raise ValidationError(f"label {label} is not a new class")
    z_stu = np.asarray(z_stu, dtype=np.float64)
    s = z_stu[np.asarray(new, dtype=int)]
    log_p = s - _logsumexp(s)
    return -float(log_p[new.index(label)])


def total_loss(ce, kd, distill_weight):
    """Combined objective: ce + distill_weight * kd."""
    if not (np.isfinite(ce) and np.isfinite(kd)):
        raise ValidationError("loss terms must be finite")
    return ce + distill_weight * kd


def _current_pairs(model):
    """Index of the current task's pair in each layer (the highest task id,
    required to be present exactly once per layer)."""
    tid = model.current_task_id()
    if tid is None:
        raise ValidationError("model has no adapters to train")
    out = []
    for li, layer in enumerate(model.layers):
        idx = [i for i, p in enumerate(layer.pairs) if p.task_id == tid]
        if len(idx) != 1:
            raise ValidationError(
                f"layer {li} must hold exactly one pair for task {tid}"
            )
        out.append(idx[0])
    return tid, out


def _batch_grads(model, xb, yb_rows, new_rows, old_rows, teacher_logits, work, cfg):
    """One forward/backward pass. Returns (mean ce, mean kd, grads) where
    grads = (list of dA per layer, dWc, dbc)."""
    nb = xb.shape[0]
    h = xb
    inputs = []
    preacts = []
    for li, layer in enumerate(model.layers):
        inputs.append(h)
        z = h @ work["eff_w"][li].T + layer.bias
        b_cur, a_cur = work["current"][li]
        if b_cur.shape[1] > 0:
            z = z + (h @ a_cur.T) @ b_cur.T
        preacts.append(z)
        h = np.maximum(z, 0.0) if li < len(model.layers) - 1 else z
    feats = h
    logits = feats @ work["wc"].T + work["bc"]

    g = np.zeros_like(logits)
    s_new = logits[:, new_rows]
    log_p = s_new - _logsumexp(s_new, axis=1, keepdims=True)
    p = np.exp(log_p)
    onehot = np.zeros_like(p)
    onehot[np.arange(nb), yb_rows] = 1.0
    mean_ce = float(-log_p[np.arange(nb), yb_rows].mean())
    g[:, new_rows] = (p - onehot) / nb

    mean_kd = 0.0
    if teacher_logits is not None:
        t = cfg.temperature
        ls = logits[:, old_rows] / t
        lt = teacher_logits[:, old_rows] / t
        log_ps = ls - _logsumexp(ls, axis=1, keepdims=True)
        log_pt = lt - _logsumexp(lt, axis=1, keepdims=True)
        pt = np.exp(log_pt)
        ps = np.exp(log_ps)
        mean_kd = float((t * t * np.sum(pt * (log_pt - log_ps), axis=1)).mean())
        g[:, old_rows] += cfg.distill_weight * t * (ps - pt) / nb

    d_wc = g.T @ feats
    d_bc = g.sum(axis=0)
    d_h = g @ work["wc"]
    d_a = [None] * len(model.layers)
    for li in reversed(range(len(model.layers))):
        if li < len(model.layers) - 1:
            d_h = d_h * (preacts[li] > 0)
        b_cur, _ = work["current"][li]
        if b_cur.shape[1] > 0:
            d_a[li] = (d_h @ b_cur).T @ inputs[li]
        else:
            d_a[li] = np.zeros((0, model.layers[li].d_in))
        if li > 0:
            d_h = d_h @ work["eff_w"][li] + (d_h @ b_cur) @ work["current"][li][1]
    return mean_ce, mean_kd, (d_a, d_wc, d_bc)


def _make_work(model, tid, cur_idx):
    """Per-task working state: effective frozen weights (base plus every
    non-current adapter, materialized once) and mutable copies of the
    trainable arrays."""
    eff_w = []
    current = []
    for li, layer in enumerate(model.layers):
        w = layer.weight.copy()
        for pair in layer.pairs:
            if pair.task_id != tid and pair.rank > 0:
                w += pair.b @ pair.a
        eff_w.append(w)
        cur = layer.pairs[cur_idx[li]]
        current.append((cur.b, cur.a.copy()))
    return {
        "eff_w": eff_w,
        "current": current,
        "wc": model.classifier_w.copy(),
        "bc": model.classifier_b.copy(),
    }


def _commit_work(model, tid, cur_idx, work):
    for li, layer in enumerate(model.layers):
        old = layer.pairs[cur_idx[li]]
        b_cur, a_cur = work["current"][li]
        layer.pairs[cur_idx[li]] = LoraPair(tid, b_cur, a_cur, old.b_frozen)
    model.classifier_w = work["wc"]
    model.classifier_b = work["bc"]


def train_task(model, dataset, partition, cfg, log=None):
    """Mini-batch SGD on the current adapter's a matrices and the classifier.

    dataset is (features, labels) with labels drawn from the partition's
    new classes. For non-empty old_classes the adapter-masked teacher is
    evaluated per batch and its old-class predictions are distilled into
    the student. Gradients reach only the current a matrices and the
    classifier; everything else is untouched by construction.

    Appends one record per epoch to `log` when given. Returns the model.
    """
    x, y = dataset
    x = matcore.as_matrix(x, "training features")
    y = np.asarray(y)
    if y.shape != (x.shape[0],):
        raise ValidationError("labels do not match feature rows")
    bad = set(int(c) for c in y) - set(partition.new_classes)
    if bad:
        raise ValidationError(f"labels outside the new class set: {sorted(bad)}")
    missing = [
        c
        for c in (*partition.old_classes, *partition.new_classes)
        if c not in model._row
    ]
    if missing:
        raise ValidationError(f"classifier lacks rows for classes {missing}")

    tid, cur_idx = _current_pairs(model)
    new_rows = np.asarray([model.row_of(c) for c in sorted(partition.new_classes)])
    old_rows = np.asarray(
        [model.row_of(c) for c in sorted(partition.old_classes)], dtype=int
    )
    row_to_pos = {int(r): i for i, r in enumerate(new_rows)}
    y_rows = np.asarray([row_to_pos[model.row_of(int(c))] for c in y])

    use_kd = len(partition.old_classes) > 0 and cfg.distill_weight > 0
    work = _make_work(model, tid, cur_idx)
    rng = np.random.default_rng([cfg.seed, tid])
    n = x.shape[0]
    global_batch = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        ce_sum = 0.0
        kd_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = x[idx]
            teacher_logits = None
            if use_kd:
                feats_t = _masked_features(model, work, xb)
                teacher_logits = feats_t @ work["wc"].T + work["bc"]
            ce, kd, (d_a, d_wc, d_bc) = _batch_grads(
                model, xb, y_rows[idx], new_rows, old_rows, teacher_logits, work, cfg
            )
            batch_loss = ce + cfg.distill_weight * kd
            if not np.isfinite(batch_loss):
                raise DivergenceError("non-finite training loss", global_batch)
            for li in range(len(model.layers)):
                work["current"][li] = (
                    work["current"][li][0],
                    work["current"][li][1] - cfg.lr_lora * d_a[li],
                )
            work["wc"] -= cfg.lr_classifier * d_wc
            work["bc"] -= cfg.lr_classifier * d_bc
            ce_sum += ce * len(idx)
            kd_sum += kd * len(idx)
            global_batch += 1
        if log is not None:
            mean_ce = ce_sum / n
            mean_kd = kd_sum / n
            log.append(
                {
                    "task": tid,
                    "epoch": epoch,
                    "mean_ce": mean_ce,
                    "mean_kd": mean_kd,
                    "total": mean_ce + cfg.distill_weight * mean_kd,
                }
            )
    if cfg.epochs > 0:
        _commit_work(model, tid, cur_idx, work)
    return model


def _masked_features(model, work, xb):
    """Backbone features with the current adapter excluded (teacher path)."""
    h = xb
    for li, layer in enumerate(model.layers):
        z = h @ work["eff_w"][li].T + layer.bias
        h = np.maximum(z, 0.0) if li < len(model.layers) - 1 else z
    return h


def analytic_gradient_check(model, batch, partition, cfg):
    """Max relative deviation between the analytic batch gradient and
    central finite differences (step 1e-5) over every trainable scalar.

    Meant for small models; frozen parameters carry no analytic gradient
    and are excluded.
    """
    x, y = batch
    x = matcore.as_matrix(x, "batch features")
    y = np.asarray(y)
    tid, cur_idx = _current_pairs(model)
    new_rows = np.asarray([model.row_of(c) for c in sorted(partition.new_classes)])
    old_rows = np.asarray(
        [model.row_of(c) for c in sorted(partition.old_classes)], dtype=int
    )
    row_to_pos = {int(r): i for i, r in enumerate(new_rows)}
    y_rows = np.asarray([row_to_pos[model.row_of(int(c))] for c in y])
    use_kd = len(partition.old_classes) > 0 and cfg.distill_weight > 0

    work = _make_work(model, tid, cur_idx)

    # The distillation target is a stop-gradient quantity, so both the
    # analytic and finite-difference paths must see the same frozen teacher.
    t_logits = None
    if use_kd:
        feats_t = _masked_features(model, work, x)
        t_logits = feats_t @ work["wc"].T + work["bc"]

    def loss_value():
        ce, kd, _ = _batch_grads(
            model, x, y_rows, new_rows, old_rows, t_logits, work, cfg
        )
        return ce + cfg.distill_weight * kd

    ce, kd, (d_a, d_wc, d_bc) = _batch_grads(
        model, x, y_rows, new_rows, old_rows, t_logits, work, cfg
    )

    params = [work["current"][li][1] for li in range(len(model.layers))]
    grads = list(d_a)
    params += [work["wc"], work["bc"]]
    grads += [d_wc, d_bc]

    h = 1e-5
    worst = 0.0
    for arr, grad in zip(params, grads):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            dev = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-6)
            worst = max(worst, dev)
    return worst


def collect_proxy_features(model, dataset, proxy_count, seed):
    """Sample layer-input activations for drift estimation.

    Draws proxy_count training samples without replacement (seeded, index
    order normalized), runs one forward pass with every adapter active,
    and returns one ProxyBatch per layer keyed by layer index.
    """
    import warnings

    x, _ = dataset
    x = matcore.as_matrix(x, "training features")
    n = x.shape[0]
    count = proxy_count
    if count > n:
        warnings.warn(
            f"proxy_count {count} exceeds dataset size {n}; clamping", stacklevel=2
        )
        count = n
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    tid = model.current_task_id()
    _, inputs, _ = model._forward(x[idx], want_cache=True)
    return {
        li: ProxyBatch(features=inp.T, source_task=tid)
        for li, inp in enumerate(inputs)
    }

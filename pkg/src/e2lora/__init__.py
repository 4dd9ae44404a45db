"""Energy-ordered low-rank adapters for continual learning.

A continual learner for linear backbones built around one idea: after a
task is trained, its adapter is rewritten in the singular basis of the
output drift it causes, so its knowledge is sorted and concentrated in the
leading rank components. Trailing components can then be pruned with a
known, provably minimal output error and their directions handed to the
next task, which trains inside an orthogonal subspace and cannot disturb
what came before. Self-distillation and classifier alignment handle the
classifier side of forgetting.

The subpackages: `matcore` (deterministic SVD/QR/sampling), `lora`
(adapters, drift, the energy transform), `allocator` (threshold pruning
and the shared capacity pool), `trainer` (per-task SGD with distillation),
`align` (classifier alignment), `bench` (synthetic streams, metrics,
strategies), `oracle` (brute-force validators), `checkpoint` (binary
serialization) and `cli` (the `e2lora` command).
"""

from .align import AlignConfig, ClassStats, align_classifier, estimate_stats
from .allocator import (
    AllocConfig,
    AllocationPlan,
    CapacityPool,
    PoolEntry,
    apply_plan,
    init_new_task,
    min_rank,
    plan_allocation,
    retained_rank_for,
)
from .bench import (
    MetricsReport,
    RunResult,
    TaskStream,
    energy_curve,
    evaluate,
    make_synthetic_stream,
    run_continual,
)
from .errors import (
    ConvergenceError,
    DivergenceError,
    E2LoraError,
    NumericalError,
    RankDeficiencyError,
    SchemaError,
    StateError,
    ValidationError,
)
from .lora import (
    DriftSpectrum,
    LoraPair,
    ProxyBatch,
    delta,
    energy_transform,
    merged_forward,
    output_drift,
    truncate,
)
from .matcore import (
    SvdResult,
    gaussian_sample,
    orthonormal_complement,
    orthonormalize,
    thin_svd,
)
from .oracle import (
    OracleReport,
    check_cross_task_orthogonality,
    check_rank_optimality,
    check_truncation_identity,
    check_uniform_pruning,
)
from .trainer import (
    ClassPartition,
    ContinualModel,
    TrainConfig,
    analytic_gradient_check,
    ce_loss,
    collect_proxy_features,
    distill_loss,
    total_loss,
    train_task,
)

__version__ = "0.1.0"

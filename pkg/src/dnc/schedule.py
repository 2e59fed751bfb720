"""Compute budgets, learning-rate schedule, LARS optimizer, cost accounting.

Budgets are expressed in reference epochs: one epoch means
``reference_size / batch_size`` optimizer steps no matter how many items the
actual corpus holds, so a 48-image cluster trained for "300 epochs" costs
the same as any other cluster at that budget. The published three-stage
splits are kept in :data:`SCHEDULE_PRESETS` for reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

# Published three-stage epoch splits, keyed by total budget.
SCHEDULE_PRESETS = {
    "1000": {"n1": 200, "n2": 600, "n3": 200, "k_clusters": 5},
    "3000": {"n1": 1000, "n2": 1500, "n3": 500, "k_clusters": 5},
    "4500": {"n1": 1000, "n2": 3000, "n3": 500, "k_clusters": 10},
}


@dataclass(frozen=True)
class ScheduleSpec:
    """Optimization hyperparameters shared by all three stages."""

    n1: float = 20.0
    n2: float = 30.0
    n3: float = 10.0
    k_clusters: int = 4
    batch_size: int = 64
    reference_size: int = 256
    base_lr: float = 0.3
    distill_lr: float | None = None  # stage-3 peak override
    warmup_epochs: float = 2.0
    weight_decay: float = 1.5e-6
    lars_momentum: float = 0.9
    tau_base: float = 0.996
    temperature: float = 0.1
    use_momentum_encoder: bool = True

    def validate(self) -> None:
        if min(self.n1, self.n2, self.n3) < 0 or self.n1 + self.n2 + self.n3 <= 0:
            raise ConfigError("stage budgets must be nonnegative with a positive total")
        if self.k_clusters < 1:
            raise ConfigError("k_clusters must be >= 1")
        if self.batch_size < 1 or self.reference_size < 1:
            raise ConfigError("batch_size and reference_size must be positive")
        if self.base_lr <= 0 or (self.distill_lr is not None and self.distill_lr <= 0):
            raise ConfigError("learning rates must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.lars_momentum < 1.0:
            raise ConfigError("lars_momentum must be in [0, 1)")
        if not 0.0 <= self.tau_base <= 1.0:
            raise ConfigError("tau_base must be in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def peak_lr(self) -> float:
        """Linear scaling rule: base rate times batch over 256."""
        return self.base_lr * self.batch_size / 256.0

    @property
    def peak_distill_lr(self) -> float:
        lr = self.base_lr if self.distill_lr is None else self.distill_lr
        return lr * self.batch_size / 256.0

    def epochs_to_steps(self, epochs: float) -> int:
        if epochs < 0:
            raise ConfigError("epochs must be >= 0")
        return int(math.floor(epochs * self.reference_size / self.batch_size + 1e-9))

    def with_updates(self, **kw) -> "ScheduleSpec":
        return replace(self, **kw)


def allocate_expert_budget(n2: float, cluster_sizes, integer: bool = False):
    """Split the expert-stage budget across clusters in proportion to size.

    Float mode returns exact proportional shares; integer mode rounds by
    largest remainder (ties to the lower index) so the total is preserved.
    Empty clusters receive zero budget.
    """
    sizes = np.asarray(cluster_sizes, dtype=np.float64)
    if n2 < 0:
        raise ConfigError("n2 must be >= 0")
    if sizes.ndim != 1 or len(sizes) == 0:
        raise ConfigError("cluster_sizes must be a nonempty 1-d sequence")
    if np.any(sizes < 0):
        raise ConfigError("cluster sizes must be >= 0")
    total = sizes.sum()
    if total <= 0:
        raise ConfigError("at least one cluster must be nonempty")
    shares = n2 * sizes / total
    if not integer:
        return shares
    if abs(n2 - round(n2)) > 1e-9:
        raise ConfigError(f"integer allocation needs an integer n2, got {n2}")
    floors = np.floor(shares + 1e-9).astype(np.int64)
    short = int(round(n2)) - int(floors.sum())
    remainders = shares - floors
    order = np.lexsort((np.arange(len(sizes)), -remainders))
    floors[order[:short]] += 1
    return floors


def lr_at(step: int, total_steps: int, spec: ScheduleSpec, peak: float | None = None) -> float:
    """Warmup ramp from zero to the peak rate, then cosine decay to zero.

    The ramp hits the peak exactly at the warmup boundary; ``lr_at(total)``
    is exactly zero.
    """
    spec.validate()
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    peak = spec.peak_lr if peak is None else peak
    warmup_steps = spec.epochs_to_steps(spec.warmup_epochs)
    if warmup_steps >= total_steps:
        raise ConfigError(
            f"warmup ({warmup_steps} steps) must be shorter than the run ({total_steps})"
        )
    if warmup_steps > 0 and step <= warmup_steps:
        return peak * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * (math.cos(math.pi * progress) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# LARS
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    buffers: dict
    step: int = 0


def init_optimizer() -> OptimizerState:
    return OptimizerState(buffers={})


def default_exclude(name: str, param: np.ndarray) -> bool:
    """Biases and normalization parameters: every tensor of rank <= 1."""
    return param.ndim <= 1


def lars_step(
    params: dict,
    grads: dict,
    opt: OptimizerState,
    lr: float,
    spec: ScheduleSpec,
    exclude=None,
) -> None:
    """One layerwise-adaptive update, in place.

    Adapted tensors: g <- grad + wd * p, scaled by the trust ratio
    |p| / |g| (1 when either norm vanishes); excluded tensors take the raw
    gradient with no decay and no adaptation. Heavy-ball momentum is applied
    to the scaled step, learning rate included.
    """
    exclude = default_exclude if exclude is None else exclude
    mu = spec.lars_momentum
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        g = np.asarray(g, dtype=p.dtype)
        if exclude(name, p):
            step_dir = lr * g
        else:
            g = g + spec.weight_decay * p
            p_norm = float(np.linalg.norm(p))
            g_norm = float(np.linalg.norm(g))
            trust = p_norm / g_norm if p_norm > 0.0 and g_norm > 0.0 else 1.0
            step_dir = (lr * trust) * g
        buf = opt.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
            opt.buffers[name] = buf
        buf *= mu
        buf += step_dir
        p -= buf
    opt.step += 1


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Per-image forward cost and the counting conventions around it.

    Published totals for comparable pipelines disagree on what a "FLOP" is,
    so the backward multiplier and MAC convention stay explicit knobs.
    """

    forward_flops: float
    teacher_forward_flops: float | None = None  # None: same as student
    backward_multiplier: float = 2.0
    views: int = 2

    @property
    def teacher_flops(self) -> float:
        return (
            self.forward_flops
            if self.teacher_forward_flops is None
            else self.teacher_forward_flops
        )


def flops_report(spec: ScheduleSpec, cost: CostModel) -> dict:
    """Training cost per image for each stage and the epoch-weighted average.

    Contrastive stages cost ``views * (F * (1 + beta) + F_teacher)`` per
    image: student forward and backward on each view plus the momentum
    encoder's forward. Distillation adds one more teacher forward per view
    (base and expert teachers instead of one momentum encoder).
    """
    spec.validate()
    f = cost.forward_flops
    beta = cost.backward_multiplier
    ft = cost.teacher_flops
    teacher_contrastive = ft if spec.use_momentum_encoder else 0.0
    per_image_contrastive = cost.views * (f * (1.0 + beta) + teacher_contrastive)
    per_image_distill = cost.views * (f * (1.0 + beta) + 2.0 * ft)
    total_epochs = spec.n1 + spec.n2 + spec.n3
    weights = {
        "base": spec.n1 / total_epochs,
        "experts": spec.n2 / total_epochs,
        "distill": spec.n3 / total_epochs,
    }
    weighted = (
        (weights["base"] + weights["experts"]) * per_image_contrastive
        + weights["distill"] * per_image_distill
    )
    return {
        "per_image": {
            "base": per_image_contrastive,
            "experts": per_image_contrastive,
            "distill": per_image_distill,
        },
        "stage_epochs": {"base": spec.n1, "experts": spec.n2, "distill": spec.n3},
        "stage_weights": weights,
        "weighted_per_image": weighted,
        "total": weighted * total_epochs * spec.reference_size,
        "conventions": {
            "forward_flops": f,
            "teacher_forward_flops": ft,
            "backward_multiplier": beta,
            "views": cost.views,
        },
    }

"""Training-configuration planning from a fixed compute budget.

Turns (GPU count, wall time, sustained throughput) into a FLOP budget and
derives peak learning rate, global batch tokens, expert granularity, and
an aligned vocabulary size from it. All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

SECONDS_PER_DAY = 86_400

# Power-law coefficients for peak LR and batch tokens as functions of the
# compute budget C (FLOPs).
LR_COEFF = 1.1576
LR_EXPONENT = -0.1529
BATCH_COEFF = 0.0694
BATCH_EXPONENT = 0.3644


@dataclass(frozen=True)
class PlanInputs:
    """Everything the planner needs, in natural units.

    `vocab_baseline` is an externally estimated starting vocabulary size;
    `vocab_adjust_factor` scales it for data-rich regimes (e.g. 163840/132500).
    """

    num_gpus: float
    wall_days: float
    flops_per_gpu_s: float
    d_model: int
    d_expert: int
    n_nonvocab_params: float
    embed_dim: int
    vocab_baseline: float
    vocab_adjust_factor: float
    vocab_alignment: int

    def validate(self) -> None:
        for name in ("num_gpus", "wall_days", "flops_per_gpu_s", "d_model",
                     "d_expert", "n_nonvocab_params", "embed_dim",
                     "vocab_baseline", "vocab_adjust_factor"):
            if not getattr(self, name) > 0:
                raise DomainError(f"PlanInputs.{name} must be > 0")
        if self.vocab_alignment < 1:
            raise DomainError("PlanInputs.vocab_alignment must be >= 1")


@dataclass(frozen=True)
class PlanResult:
    budget_flops: float
    peak_lr: float
    batch_tokens: float
    granularity: float
    vocab_size: int


def compute_budget(num_gpus: float, wall_days: float, flops_per_gpu_s: float) -> float:
    """Total training FLOPs: gpus x days x 86,400 s/day x FLOPs/s/GPU."""
    if not (num_gpus > 0 and wall_days > 0 and flops_per_gpu_s > 0):
        raise DomainError("compute_budget inputs must be > 0")
    return num_gpus * wall_days * SECONDS_PER_DAY * flops_per_gpu_s


def plan_lr(budget_flops: float) -> float:
    """Peak learning rate from the compute budget: 1.1576 * C^-0.1529."""
    if not budget_flops > 0:
        raise DomainError("plan_lr requires a positive budget")
    return LR_COEFF * budget_flops ** LR_EXPONENT


def plan_batch(budget_flops: float) -> float:
    """Global batch size in tokens from the budget: 0.0694 * C^0.3644."""
    if not budget_flops > 0:
        raise DomainError("plan_batch requires a positive budget")
    return BATCH_COEFF * budget_flops ** BATCH_EXPONENT


def plan_granularity(d_model: float, d_expert: float) -> float:
    """Expert granularity 2*d_model/d_expert (how finely the FFN is sliced)."""
    if d_expert == 0:
        raise DomainError("plan_granularity: d_expert must be nonzero")
    if not (d_model > 0 and d_expert > 0):
        raise DomainError("plan_granularity requires positive widths")
    return 2.0 * d_model / d_expert


def plan_vocab(baseline: float, adjust_factor: float, alignment: int) -> int:
    """Adjusted vocabulary rounded to the nearest multiple of `alignment`.

    Exact half-way ties round down.
    """
    if not (baseline > 0 and adjust_factor > 0):
        raise DomainError("plan_vocab requires positive baseline and factor")
    if alignment < 1:
        raise DomainError("plan_vocab alignment must be >= 1")
    raw = baseline * adjust_factor
    lower = math.floor(raw / alignment) * alignment
    upper = lower + alignment
    # nearest multiple; ties (raw exactly between) go down
    chosen = upper if (raw - lower) > (upper - raw) else lower
    return int(chosen)


def make_plan(inputs: PlanInputs) -> PlanResult:
    """Run every planning formula on one set of inputs."""
    inputs.validate()
    budget = compute_budget(inputs.num_gpus, inputs.wall_days, inputs.flops_per_gpu_s)
    return PlanResult(
        budget_flops=budget,
        peak_lr=plan_lr(budget),
        batch_tokens=plan_batch(budget),
        granularity=plan_granularity(inputs.d_model, inputs.d_expert),
        vocab_size=plan_vocab(inputs.vocab_baseline, inputs.vocab_adjust_factor,
                              inputs.vocab_alignment),
    )

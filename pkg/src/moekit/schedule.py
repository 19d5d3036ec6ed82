"""Learning-rate schedule, batch-size ramp, and curriculum stage switches.

The LR follows warmup-stable-decay: linear 0 -> peak, a constant plateau,
then a decay to `min_lr` (linear by default, cosine optional). The batch
ramp is a staircase over a fixed sample span. Stage switches carry the
multi-token loss weight, the router bias update rate, and the sequence
length for each of the three pre-training stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class WsdSchedule:
    warmup_steps: int
    stable_steps: int
    decay_steps: int
    peak_lr: float
    min_lr: float = 0.0
    decay_shape: str = "linear"  # or "cosine"

    def __post_init__(self):
        if min(self.warmup_steps, self.stable_steps, self.decay_steps) < 0:
            raise ConfigError("WsdSchedule step counts must be >= 0")
        if not self.peak_lr >= self.min_lr >= 0:
            raise ConfigError("WsdSchedule requires peak_lr >= min_lr >= 0")
        if self.decay_shape not in ("linear", "cosine"):
            raise ConfigError(f"unknown decay_shape {self.decay_shape!r}")


@dataclass(frozen=True)
class BatchRamp:
    """Staircase batch growth, default 2,048 -> 16,384 in steps of 1,024."""

    start: int = 2_048
    end: int = 16_384
    increment: int = 1_024
    ramp_samples: int = 72_000_000

    def __post_init__(self):
        if self.ramp_samples <= 0:
            raise ConfigError("BatchRamp.ramp_samples must be > 0")
        if self.increment <= 0 or self.end < self.start:
            raise ConfigError("BatchRamp requires end >= start and increment > 0")
        if (self.end - self.start) % self.increment != 0:
            raise ConfigError("BatchRamp span must be divisible by increment")

    @property
    def intervals(self) -> int:
        return (self.end - self.start) // self.increment


@dataclass(frozen=True)
class StageMixture:
    """A training stage's category weights (percent) and stage knobs."""

    stage: int
    weights: dict[str, float]
    sequence_length: int
    mtp_lambda: float
    bias_update_rate: float

    def __post_init__(self):
        if not self.weights:
            raise ConfigError(f"stage {self.stage}: empty mixture")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError(f"stage {self.stage}: negative weight")
        total = sum(self.weights.values())
        # 0.01 tolerance, with slack for float summation of the percentages
        if abs(total - 100.0) > 0.01 + 1e-9:
            raise ConfigError(f"stage {self.stage}: weights sum to {total}, expected 100")


def lr_at(step: int, sched: WsdSchedule) -> float:
    """Learning rate at an integer step (0-based)."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    w, s, d = sched.warmup_steps, sched.stable_steps, sched.decay_steps
    if step < w:
        return sched.peak_lr * step / w
    if step < w + s:
        return sched.peak_lr
    if step < w + s + d:
        frac = (step - w - s) / d
        if sched.decay_shape == "cosine":
            return sched.min_lr + (sched.peak_lr - sched.min_lr) * 0.5 * (1 + math.cos(math.pi * frac))
        return sched.peak_lr + (sched.min_lr - sched.peak_lr) * frac
    return sched.min_lr


def batch_at(samples_seen: int, ramp: BatchRamp) -> int:
    """Batch size after `samples_seen` samples: equal-width staircase."""
    if samples_seen < 0:
        raise ConfigError("samples_seen must be >= 0")
    if ramp.intervals == 0 or samples_seen >= ramp.ramp_samples:
        return ramp.end
    step = samples_seen * ramp.intervals // ramp.ramp_samples
    return ramp.start + ramp.increment * min(step, ramp.intervals)


def sample_category(mix: StageMixture, rng: np.random.Generator) -> str:
    """Draw one category id with probability weight/100."""
    return sample_categories(mix, rng, 1)[0]


def sample_categories(mix: StageMixture, rng: np.random.Generator, n: int) -> list[str]:
    """Draw `n` category ids; deterministic given the generator state."""
    names = list(mix.weights.keys())
    probs = np.array([mix.weights[n] for n in names], dtype=np.float64)
    probs /= probs.sum()
    draws = rng.choice(len(names), size=n, p=probs)
    return [names[i] for i in draws]


@dataclass(frozen=True)
class StageParams:
    mtp_lambda: float
    bias_update_rate: float
    sequence_length: int


def stage_params(stage: int, base_seq: int = 4_096, extended_seq: int = 16_384) -> StageParams:
    """Per-stage knobs: λ 0.3 -> 0.1 after stage 1, bias rate 0 in stage 3.

    Stage 3 is the long-context extension; its 16K/32K curriculum is
    represented by `extended_seq` (callers scale it down for toy runs).
    """
    if stage == 1:
        return StageParams(0.3, 1e-3, base_seq)
    if stage == 2:
        return StageParams(0.1, 1e-3, base_seq)
    if stage == 3:
        return StageParams(0.1, 0.0, extended_seq)
    raise ConfigError(f"unknown stage {stage}; expected 1, 2, or 3")


# Default per-stage dataset composition (percent by category).
DEFAULT_STAGE_WEIGHTS: dict[int, dict[str, float]] = {
    1: {
        "web": 53.41, "code": 17.13, "encyclopedia": 14.84, "qa": 13.04,
        "books": 0.77, "academic": 0.66, "others": 0.16,
    },
    2: {
        "web": 39.79, "code": 29.42, "encyclopedia": 0.64, "qa": 8.95,
        "books": 4.35, "academic": 7.23, "mathematics": 5.41, "stem": 2.47,
        "reasoning": 0.82, "others": 0.91,
    },
    3: {
        "web": 33.32, "code": 25.50, "encyclopedia": 0.72, "qa": 5.38,
        "books": 3.70, "academic": 3.87, "mathematics": 9.24, "stem": 9.07,
        "reasoning": 8.32, "others": 0.87,
    },
}


def default_stage_mixture(stage: int, base_seq: int = 4_096,
                          extended_seq: int = 16_384) -> StageMixture:
    """The stock mixture + knobs for a stage id."""
    if stage not in DEFAULT_STAGE_WEIGHTS:
        raise ConfigError(f"unknown stage {stage}")
    params = stage_params(stage, base_seq, extended_seq)
    return StageMixture(
        stage=stage,
        weights=dict(DEFAULT_STAGE_WEIGHTS[stage]),
        sequence_length=params.sequence_length,
        mtp_lambda=params.mtp_lambda,
        bias_update_rate=params.bias_update_rate,
    )

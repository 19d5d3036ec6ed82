"""AdamW optimization, composite loss assembly, and the staged training loop.

The per-step loss is main next-token cross-entropy plus a stage-dependent
multiple of the future-token cross-entropy plus the (already scaled)
per-layer balance losses. Training walks the configured stages, driving
the LR schedule, the batch ramp, the router bias rate, and the loss
weights, and emits one metrics record per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, NumericError, ShapeError
from .model import (
    ModelConfig,
    RouterState,
    init_params,
    init_router_states,
    model_forward,
    update_router_bias,
    zero_grads,
)
from .schedule import BatchRamp, StageMixture, WsdSchedule, batch_at, lr_at, sample_categories
from .tensor import Tensor


@dataclass
class AdamWParams:
    """Optimizer hyperparameters plus per-parameter moment state."""

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("AdamW betas must be in [0, 1)")


def adamw_step(params: dict[str, Tensor], state: AdamWParams, lr: float) -> None:
    """One decoupled-weight-decay Adam update with bias correction.

    Gradients are read from each tensor's `.grad`; missing grads are zero.
    Non-finite gradients reject the whole step (state untouched).
    """
    if lr < 0:
        raise ConfigError("lr must be >= 0")
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}; step rejected")
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape mismatch for {name!r}")
        grads[name] = g
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most `max_norm`."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class LossBreakdown:
    """Composite loss in nats/token: total = main + lambda * mtp + aux."""

    main_ce: float
    mtp_ce: float
    aux: float
    total: float
    mtp_lambda: float
    tensor: Tensor  # the differentiable total


def total_loss(main_logits: Tensor, mtp_logits: Tensor | None, targets,
               mtp_lambda: float, aux_terms: list[Tensor]) -> LossBreakdown:
    """Assemble main CE + lambda * future-token CE + balance losses.

    `targets` are the full input ids (batch, seq); the main CE is taken at
    positions 0..T-2 against ids 1..T-1, the future-token CE at positions
    0..T-3 against ids 2..T-1.
    """
    if mtp_lambda < 0:
        raise ConfigError("mtp_lambda must be >= 0")
    ids = np.asarray(targets)
    S = ids.shape[1]
    main = T.cross_entropy(main_logits[:, : S - 1], ids[:, 1:])
    total = main
    if mtp_logits is not None and mtp_lambda > 0:
        mtp = T.cross_entropy(mtp_logits, ids[:, 2:])
        total = total + mtp * mtp_lambda
        mtp_value = mtp.item()
    elif mtp_logits is not None:
        mtp_value = T.cross_entropy(mtp_logits, ids[:, 2:]).item()
    else:
        mtp_value = 0.0
    aux_value = 0.0
    for aux in aux_terms:
        total = total + aux
        aux_value += aux.item()
    return LossBreakdown(
        main_ce=main.item(), mtp_ce=mtp_value, aux=aux_value,
        total=main.item() + mtp_lambda * mtp_value + aux_value,
        mtp_lambda=mtp_lambda, tensor=total,
    )


@dataclass(frozen=True)
class StagePlan:
    """One curriculum stage of a toy run."""

    stage: int
    steps: int
    seq_len: int
    mtp_lambda: float
    bias_update_rate: float
    mixture: StageMixture | None = None


@dataclass
class TrainConfig:
    model: ModelConfig
    stages: list[StagePlan]
    schedule: WsdSchedule
    ramp: BatchRamp
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    adam_eps: float = 1e-8
    init_std: float = 0.02
    dtype: str = "wide"  # "wide" (float64) or "narrow" (float32)

    def numpy_dtype(self):
        from .tensor import NARROW, WIDE

        if self.dtype == "wide":
            return WIDE
        if self.dtype == "narrow":
            return NARROW
        raise ConfigError(f"unknown dtype {self.dtype!r}")


@dataclass
class TrainResult:
    records: list[dict]
    checkpoint: Checkpoint
    params: dict[str, Tensor]
    stopped_reason: str  # "completed", "corpus_exhausted"


def train_run(cfg: TrainConfig, corpus, rng: np.random.Generator,
              out_dir=None, on_record=None) -> TrainResult:
    """Run the staged optimization loop.

    `corpus` maps (category, batch_size, seq_len, rng) -> int token array of
    shape (batch, seq), or raises StopIteration when exhausted. Per-step
    records carry step, stage, lr, batch size, the loss breakdown, and the
    per-expert load counts; each is also passed to `on_record` as it is
    produced, so a metrics stream survives an aborted run. Checkpoints are
    written at stage boundaries and on completion when `out_dir` is given.
    Fully deterministic given `rng`.
    """
    if not cfg.stages:
        raise ConfigError("train_run needs at least one stage")
    params = init_params(cfg.model, rng, dtype=cfg.numpy_dtype(), init_std=cfg.init_std)
    states = init_router_states(cfg.model)
    opt = AdamWParams(weight_decay=cfg.weight_decay, eps=cfg.adam_eps)
    records: list[dict] = []
    samples_seen = 0
    step = 0
    stopped = "completed"

    def emit(record: dict) -> None:
        records.append(record)
        if on_record is not None:
            on_record(record)

    for stage_idx, stage in enumerate(cfg.stages):
        states = [
            _with_rate(s, stage.bias_update_rate) for s in states
        ]
        for _ in range(stage.steps):
            lr = lr_at(step, cfg.schedule)
            batch = batch_at(samples_seen, cfg.ramp)
            if stage.mixture is not None:
                category = sample_categories(stage.mixture, rng, 1)[0]
            else:
                category = None
            try:
                tokens = corpus(category, batch, stage.seq_len, rng)
            except StopIteration:
                stopped = "corpus_exhausted"
                emit({"step": step, "event": "corpus_exhausted"})
                break

            result = model_forward(tokens, cfg.model, params, states)
            loss = total_loss(result.logits, result.mtp_logits, tokens,
                              stage.mtp_lambda, result.aux_losses)
            if not math.isfinite(loss.total):
                # non-finite floats are not valid JSON; record them as text
                emit({"step": step, "event": "nan_loss", "stage": stage.stage,
                      "main_ce_raw": repr(loss.main_ce),
                      "mtp_ce_raw": repr(loss.mtp_ce)})
                raise NumericError(f"non-finite loss at step {step}")
            zero_grads(params)
            loss.tensor.backward()
            grad_norm = clip_grad_norm(params, cfg.grad_clip)
            adamw_step(params, opt, lr)
            layer_loads = result.load_stats.sum(axis=0)
            states = [update_router_bias(s, result.load_stats[i])
                      for i, s in enumerate(states)]
            emit({
                "step": step, "stage": stage.stage, "lr": lr, "batch": batch,
                "category": category, "main_ce": loss.main_ce,
                "mtp_ce": loss.mtp_ce, "aux": loss.aux, "total": loss.total,
                "mtp_lambda": stage.mtp_lambda, "grad_norm": grad_norm,
                "expert_load": layer_loads.tolist(),
            })
            samples_seen += batch
            step += 1
        ckpt = Checkpoint.from_params(params, cfg.model)
        if out_dir is not None:
            save_checkpoint(ckpt, f"{out_dir}/ckpt_stage{stage_idx + 1}.bin")
        if stopped != "completed":
            break

    final = Checkpoint.from_params(params, cfg.model)
    if out_dir is not None:
        save_checkpoint(final, f"{out_dir}/ckpt_final.bin")
    return TrainResult(records=records, checkpoint=final, params=params,
                       stopped_reason=stopped)


def _with_rate(state: RouterState, rate: float) -> RouterState:
    return RouterState(bias=state.bias, bias_update_rate=rate,
                       aux_coefficient=state.aux_coefficient,
                       cumulative_load=state.cumulative_load)

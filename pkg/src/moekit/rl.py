"""On-policy RL with a sequence-level clipped objective on verifiable tasks.

Every base instruction becomes two independent training prompts, one per
mode, differing only in the appended control token. Rollouts are scored
with a two-part reward (answer correctness in {1, -1} plus a format
penalty in {0, -1}), advantages are normalized within each rollout group,
and the policy update uses a length-normalized sequence importance ratio
with asymmetric clipping. Zero-variance groups can be filtered out before
the update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .fusion import NONTHINK, THINK, respond, validate_mode_format
from .model import ModelConfig, generate, init_router_states, model_forward, zero_grads
from .tensor import Tensor
from .tokenizer import CLOSE_TAG, EOS, OPEN_TAG, BbpeModel
from .trainer import AdamWParams, adamw_step, clip_grad_norm


@dataclass(frozen=True)
class PromptVariant:
    """A base instruction rendered for one response mode."""

    instruction_ids: tuple[int, ...]
    mode: str
    control_id: int

    @property
    def prompt_ids(self) -> list[int]:
        return list(self.instruction_ids) + [self.control_id]


def make_prompt_variants(instruction_ids, tok: BbpeModel) -> tuple[PromptVariant, PromptVariant]:
    """Two prompts from one instruction: think and direct control tokens."""
    ids = tuple(int(i) for i in instruction_ids)
    if not ids:
        raise ConfigError("instruction must be nonempty")
    return (
        PromptVariant(ids, THINK, tok.token_id(OPEN_TAG)),
        PromptVariant(ids, NONTHINK, tok.token_id(CLOSE_TAG)),
    )


@dataclass(frozen=True)
class RewardSpec:
    correct: int  # 1 or -1
    format: int   # 0 or -1

    @property
    def total(self) -> int:
        return self.correct + self.format


def extract_answer(text: str) -> str:
    """Final-line answer after the last reasoning close tag, if any."""
    tail = text.rsplit(CLOSE_TAG, 1)[-1]
    lines = [ln.strip() for ln in tail.splitlines() if ln.strip()]
    return lines[-1] if lines else ""


def reward(text: str, gold: str, mode: str) -> RewardSpec:
    """Score one full response (leading control tag included)."""
    correct = 1 if extract_answer(text) == gold.strip() else -1
    fmt = 0 if validate_mode_format(text, mode).valid else -1
    return RewardSpec(correct=correct, format=fmt)


def group_advantages(rewards, eps: float = 1e-6) -> np.ndarray:
    """(r - mean) / (std + eps) within one rollout group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ConfigError("a group needs at least 2 rollouts")
    return (r - r.mean()) / (r.std() + eps)


@dataclass(frozen=True)
class GspoConfig:
    group_size: int = 4
    clip_low: float = 0.2
    clip_high: float = 0.28
    advantage_eps: float = 1e-6
    dynamic_sampling: bool = True

    def __post_init__(self):
        if not self.clip_high >= self.clip_low > 0:
            raise ConfigError("need clip_high >= clip_low > 0")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")


@dataclass
class GspoDiagnostics:
    clip_fraction: float
    mean_ratio: float
    n_sequences: int
    excluded_empty: int


def gspo_loss(new_logps: list[Tensor], old_logps: list[np.ndarray],
              advantages, cfg: GspoConfig) -> tuple[Tensor, GspoDiagnostics]:
    """Clipped sequence-level objective.

    Each sequence's ratio is exp(mean per-token log-ratio), so it depends
    only on the average per-token likelihood shift, not on length. The
    objective is -mean_i min(s_i * a_i, clip(s_i, 1-cl, 1+ch) * a_i).
    Length-zero rollouts are excluded and counted.
    """
    if not (len(new_logps) == len(old_logps) == len(advantages)):
        raise ConfigError("gspo_loss inputs must align")
    lo, hi = 1.0 - cfg.clip_low, 1.0 + cfg.clip_high
    per_seq = []
    ratios = []
    clipped_count = 0
    excluded = 0
    for new, old, adv in zip(new_logps, old_logps, advantages):
        old = np.asarray(old, dtype=np.float64)
        if old.size == 0 or new.data.size == 0:
            excluded += 1
            continue
        if new.data.size != old.size:
            raise ConfigError("old/new log-prob length mismatch")
        mean_diff = T.mean(new - Tensor(old))
        s = T.exp(mean_diff)
        ratios.append(float(s.data))
        if not lo <= float(s.data) <= hi:
            clipped_count += 1
        objective = T.minimum(s * float(adv), T.clip(s, lo, hi) * float(adv))
        per_seq.append(objective)
    if not per_seq:
        raise ConfigError("gspo_loss: every rollout was empty")
    loss = -T.mean(T.stack_scalars(per_seq))
    diag = GspoDiagnostics(
        clip_fraction=clipped_count / len(per_seq),
        mean_ratio=float(np.mean(ratios)),
        n_sequences=len(per_seq),
        excluded_empty=excluded,
    )
    return loss, diag


# ---------------------------------------------------------------------------
# the rollout/update loop
# ---------------------------------------------------------------------------

def discard_group(reward_totals, dynamic_sampling: bool) -> bool:
    """Zero-variance groups (all-correct as much as all-wrong) carry no
    advantage signal and are dropped when dynamic sampling is on."""
    return dynamic_sampling and len(set(reward_totals)) == 1


@dataclass
class RlConfig:
    gspo: GspoConfig = field(default_factory=GspoConfig)
    iterations: int = 100
    prompts_per_iter: int = 2
    max_new_tokens: int = 24
    temperature: float = 1.0
    lr: float = 1e-3
    grad_clip: float = 1.0
    weight_decay: float = 0.0


@dataclass
class Rollout:
    prompt_ids: list[int]
    response_ids: list[int]
    old_logps: np.ndarray
    text: str
    mode: str
    reward: RewardSpec
    advantage: float = 0.0


def rl_run(cfg: ModelConfig, params, tok: BbpeModel, task_generator,
           rl: RlConfig, seed: int) -> dict:
    """Iterate {sample groups, score, normalize, sequence-level update}.

    `task_generator(rng)` yields a ToyInstruction. Rollout RNG streams are
    derived from (seed, iteration, prompt, variant, sample) so runs are
    reproducible and rollouts independent. Returns the metrics records and
    the trained parameters.
    """
    states = init_router_states(cfg)
    opt = AdamWParams(weight_decay=rl.weight_decay)
    eos = tok.token_id(EOS)
    records = []
    root = np.random.SeedSequence(seed)
    prompt_rng = np.random.default_rng(root.spawn(1)[0])

    for iteration in range(rl.iterations):
        groups: list[list[Rollout]] = []
        for p in range(rl.prompts_per_iter):
            inst = task_generator(prompt_rng)
            variants = make_prompt_variants(tok.encode(inst.instruction), tok)
            for v_idx, variant in enumerate(variants):
                group = []
                for s_idx in range(rl.gspo.group_size):
                    rng = np.random.default_rng(
                        np.random.SeedSequence([seed, iteration, p, v_idx, s_idx]))
                    ids, logps = generate(cfg, params, states, variant.prompt_ids,
                                          rl.max_new_tokens, rng=rng,
                                          temperature=rl.temperature, eos_id=eos)
                    text = (OPEN_TAG if variant.mode == THINK else CLOSE_TAG) + tok.decode(ids)
                    r = reward(text, inst.gold, variant.mode)
                    group.append(Rollout(variant.prompt_ids, ids, np.asarray(logps),
                                         text, variant.mode, r))
                groups.append(group)

        kept: list[Rollout] = []
        skipped_groups = 0
        for group in groups:
            totals = [g.reward.total for g in group]
            if discard_group(totals, rl.gspo.dynamic_sampling):
                skipped_groups += 1
                continue
            advs = group_advantages(totals, rl.gspo.advantage_eps)
            for g, a in zip(group, advs):
                g.advantage = float(a)
            kept.extend(group)

        all_rollouts = [g for group in groups for g in group]
        rewards = [g.reward.total for g in all_rollouts]
        fmt_bad = {m: np.mean([g.reward.format < 0 for g in all_rollouts if g.mode == m])
                   for m in (THINK, NONTHINK)}
        record = {
            "iteration": iteration,
            "reward_mean": float(np.mean(rewards)),
            "reward_std": float(np.std(rewards)),
            "format_violation_think": float(fmt_bad[THINK]),
            "format_violation_nonthink": float(fmt_bad[NONTHINK]),
            "skipped_groups": skipped_groups,
            "n_kept": len(kept),
        }
        if not kept:
            record["event"] = "all_groups_discarded"
            records.append(record)
            continue

        new_logps = _policy_logps(cfg, params, states, kept, tok)
        loss, diag = gspo_loss(new_logps, [g.old_logps for g in kept],
                               [g.advantage for g in kept], rl.gspo)
        zero_grads(params)
        loss.backward()
        clip_grad_norm(params, rl.grad_clip)
        adamw_step(params, opt, rl.lr)
        record.update({"loss": loss.item(), "clip_fraction": diag.clip_fraction,
                       "mean_ratio": diag.mean_ratio})
        records.append(record)

    return {"records": records, "params": params}


def rl_experiment(fusion_seed: int = 7, rl_seed: int = 505,
                  iterations: int = 100) -> dict:
    """The full post-training pipeline ending in the RL stage.

    Builds the fused hybrid-mode checkpoint on the synthetic suite, then
    runs the clipped sequence-level policy optimization on single-digit-sum
    prompts. Returns the RL metrics records, the trained parameters, and
    the per-window mean rewards.
    """
    from .fusion import think_fusion_experiment
    from .tasks import small_sum_instruction

    fusion = think_fusion_experiment(seed=fusion_seed, mod_steps=400)
    params = fusion.fused.to_tensors()
    rl_cfg = RlConfig(gspo=GspoConfig(group_size=8), iterations=iterations,
                      prompts_per_iter=2, max_new_tokens=24, temperature=1.0,
                      lr=1e-3)
    out = rl_run(fusion.cfg, params, fusion.tokenizer, small_sum_instruction,
                 rl_cfg, seed=rl_seed)
    means = [r["reward_mean"] for r in out["records"]]
    out["fusion"] = fusion
    out["reward_windows"] = {
        "first10": float(np.mean(means[:10])),
        "last10": float(np.mean(means[-10:])),
    }
    return out


def _policy_logps(cfg, params, states, rollouts: list[Rollout],
                  tok: BbpeModel) -> list[Tensor]:
    """Per-token log-probs of each rollout under the current policy."""
    pad = tok.token_id(EOS)
    seqs = [r.prompt_ids + r.response_ids for r in rollouts]
    maxlen = max(len(s) for s in seqs)
    ids = np.full((len(seqs), maxlen), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    result = model_forward(ids, cfg, params, states)
    lp = T.log_softmax(result.logits, axis=-1)
    out = []
    for i, r in enumerate(rollouts):
        p0 = len(r.prompt_ids)
        positions = np.arange(p0 - 1, p0 - 1 + len(r.response_ids))
        targets = np.asarray(r.response_ids, dtype=np.int64)
        out.append(lp[i, positions, targets])
    return out

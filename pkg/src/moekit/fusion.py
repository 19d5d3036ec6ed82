"""Hybrid-mode post-training: checkpoint merging, mode-overlap SFT, and
mode-format validation.

Two specialized checkpoints (one trained on reasoning-span responses, one
on direct responses) are blended linearly, parameter by parameter. The
merged model is then fine-tuned on a mode-overlap dataset that pairs every
prompt with both response styles, which repairs the mode confusion the raw
blend exhibits (wrong-mode tags, unclosed spans).

Mode tags are reserved tokenizer ids. A rendered training sequence is

    [prompt ids] [mode tag] [response body ids] [eos]

and the loss mask covers the prompt and the leading mode tag: the tag is
the user-facing mode switch and is given, while everything after it,
including the closing tag inside a reasoning span, is model-emitted
structure that must be learned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import ConfigError, MergeError
from .model import ModelConfig, generate, init_router_states, model_forward, zero_grads
from .tasks import ToyInstruction
from .tensor import Tensor
from .tokenizer import CLOSE_TAG, EOS, OPEN_TAG, PAD, BbpeModel
from .trainer import AdamWParams, adamw_step, clip_grad_norm

THINK = "think"
NONTHINK = "nonthink"
MODES = (THINK, NONTHINK)


# ---------------------------------------------------------------------------
# Checkpoint merging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MergeSpec:
    """Linear blend: alpha * theta_think + (1 - alpha) * theta_nonthink."""

    alpha: float
    theta_think: Checkpoint
    theta_nonthink: Checkpoint

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")


def merge_checkpoints(spec: MergeSpec) -> Checkpoint:
    """Elementwise interpolation of two identically shaped parameter trees."""
    a, b = spec.theta_think, spec.theta_nonthink
    problems = []
    if list(a.params.keys()) != list(b.params.keys()):
        only_a = [k for k in a.params if k not in b.params]
        only_b = [k for k in b.params if k not in a.params]
        problems += [f"only in think: {k}" for k in only_a]
        problems += [f"only in nonthink: {k}" for k in only_b]
        if not problems:
            problems.append("same names, different order")
    for name in a.params.keys() & b.params.keys():
        if a.params[name].shape != b.params[name].shape:
            problems.append(f"shape mismatch at {name}: "
                            f"{a.params[name].shape} vs {b.params[name].shape}")
    if problems:
        raise MergeError("cannot merge checkpoints: " + "; ".join(sorted(problems)))
    if a.digest != b.digest:
        raise MergeError("cannot merge checkpoints built from different configs")

    alpha = spec.alpha
    merged: dict[str, np.ndarray] = {}
    for name, think in a.params.items():
        if alpha == 1.0:
            merged[name] = think.copy()
        elif alpha == 0.0:
            merged[name] = b.params[name].copy()
        else:
            merged[name] = alpha * think + (1.0 - alpha) * b.params[name]
    return Checkpoint(a.digest, merged)


# ---------------------------------------------------------------------------
# Mode format validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeVerdict:
    valid: bool
    violations: tuple[str, ...]


def validate_mode_format(text: str, mode: str) -> ModeVerdict:
    """Check a decoded response against its mode's tag grammar.

    Thinking mode: exactly one open tag at position 0, exactly one close
    tag after it, and a nonempty answer after the close tag. Non-thinking
    mode: the close tag at position 0 and no open tag anywhere. Total over
    arbitrary strings; never raises.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    text = str(text)
    opens = text.count(OPEN_TAG)
    closes = text.count(CLOSE_TAG)
    violations: list[str] = []
    if mode == THINK:
        if opens == 0:
            violations.append("missing-open-tag")
        elif not text.startswith(OPEN_TAG):
            violations.append("open-tag-not-at-start")
        if opens > 1:
            violations.append("duplicate-open-tag")
        if closes == 0:
            violations.append("unclosed-reasoning-span")
        elif opens > 0 and text.find(CLOSE_TAG) < text.find(OPEN_TAG):
            violations.append("misordered-tags")
        if closes > 1:
            violations.append("duplicate-close-tag")
        if closes >= 1 and not text.rsplit(CLOSE_TAG, 1)[-1].strip():
            violations.append("empty-response")
    else:
        if not text.startswith(CLOSE_TAG):
            violations.append("missing-close-tag-prefix")
        if opens > 0:
            violations.append("open-tag-in-direct-mode")
    return ModeVerdict(valid=not violations, violations=tuple(violations))


# ---------------------------------------------------------------------------
# Mode-overlap dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeSample:
    """One prompt with both response styles."""

    domain: str
    prompt: str
    y_think: str
    y_nonthink: str
    gold: str


@dataclass
class ModeDataset:
    think: list[tuple[str, str, str]] = field(default_factory=list)     # (prompt, response, mode)
    nonthink: list[tuple[str, str, str]] = field(default_factory=list)
    mix: list[tuple[str, str, str]] = field(default_factory=list)
    domain_counts: dict[str, int] = field(default_factory=dict)
    rejected: int = 0


def build_mod_dataset(n_prompts: int, generators: dict, ratios: dict[str, float],
                      rng: np.random.Generator) -> ModeDataset:
    """Draw prompts by domain ratio and pair both modes for every prompt.

    `generators` maps domain -> callable(rng) -> ToyInstruction. Samples
    whose responses fail their own mode's format check are rejected and
    counted instead of included.
    """
    if not generators or not ratios:
        raise ConfigError("need at least one generator and ratio")
    unknown = set(ratios) - set(generators)
    if unknown:
        raise ConfigError(f"ratios name unknown domains: {sorted(unknown)}")
    domains = sorted(ratios)
    probs = np.array([ratios[d] for d in domains], dtype=np.float64)
    if (probs < 0).any() or probs.sum() <= 0:
        raise ConfigError("ratios must be non-negative and not all zero")
    probs /= probs.sum()

    ds = ModeDataset()
    draws = rng.choice(len(domains), size=n_prompts, p=probs)
    for k in draws:
        domain = domains[int(k)]
        inst: ToyInstruction = generators[domain](rng)
        sample = ModeSample(domain=domain, prompt=inst.instruction,
                            y_think=inst.y_think, y_nonthink=inst.y_nonthink,
                            gold=inst.gold)
        if not validate_mode_format(sample.y_think, THINK).valid \
                or not validate_mode_format(sample.y_nonthink, NONTHINK).valid:
            ds.rejected += 1
            continue
        ds.domain_counts[domain] = ds.domain_counts.get(domain, 0) + 1
        ds.think.append((sample.prompt, sample.y_think, THINK))
        ds.nonthink.append((sample.prompt, sample.y_nonthink, NONTHINK))
        ds.mix.append((sample.prompt, sample.y_think, THINK))
        ds.mix.append((sample.prompt, sample.y_nonthink, NONTHINK))
    return ds


# ---------------------------------------------------------------------------
# Rendering and the SFT objective
# ---------------------------------------------------------------------------

def encode_tagged(tok: BbpeModel, text: str) -> list[int]:
    """Encode text, mapping tag literals to their reserved token ids."""
    ids: list[int] = []
    rest = text
    while rest:
        hits = [(rest.find(tag), tag) for tag in (OPEN_TAG, CLOSE_TAG) if tag in rest]
        if not hits:
            ids += tok.encode(rest)
            break
        pos, tag = min(hits)
        if pos > 0:
            ids += tok.encode(rest[:pos])
        ids.append(tok.token_id(tag))
        rest = rest[pos + len(tag):]
    return ids


@dataclass
class RenderedSample:
    ids: np.ndarray    # (T,) int token ids: prompt + mode tag + body + eos
    mask: np.ndarray   # (T,) 1 where the token contributes to the loss


def render_sample(tok: BbpeModel, prompt: str, response: str, mode: str) -> RenderedSample | None:
    """Token ids + loss mask for one (prompt, response, mode) record.

    The response must start with its mode tag; the prompt and that leading
    tag are masked out. Returns None (to be skipped) when no response
    tokens remain after masking.
    """
    lead = OPEN_TAG if mode == THINK else CLOSE_TAG
    if not response.startswith(lead):
        return None
    body = response[len(lead):]
    prompt_ids = tok.encode(prompt)
    body_ids = encode_tagged(tok, body)
    if not body_ids:
        return None
    ids = prompt_ids + [tok.token_id(lead)] + body_ids + [tok.token_id(EOS)]
    mask = np.zeros(len(ids), dtype=np.int64)
    mask[len(prompt_ids) + 1:] = 1
    return RenderedSample(np.asarray(ids, dtype=np.int64), mask)


def sft_loss(cfg: ModelConfig, params, states, batch: list[RenderedSample],
             pad_id: int = 0) -> Tensor:
    """Mean NLL over response tokens only, across the whole batch."""
    if not batch:
        raise ConfigError("empty SFT batch")
    maxlen = max(len(s.ids) for s in batch)
    ids = np.full((len(batch), maxlen), pad_id, dtype=np.int64)
    mask = np.zeros((len(batch), maxlen), dtype=bool)
    for i, s in enumerate(batch):
        ids[i, : len(s.ids)] = s.ids
        mask[i, : len(s.ids)] = s.mask.astype(bool)
    result = model_forward(ids, cfg, params, states)
    # position t predicts token t+1; keep rows whose *target* is unmasked
    rows, cols = np.nonzero(mask[:, 1:])
    logits_rows = result.logits[rows, cols]
    targets = ids[:, 1:][rows, cols]
    return T.cross_entropy(logits_rows, targets)


@dataclass
class SftConfig:
    steps: int = 120
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0


@dataclass
class SftResult:
    params: dict[str, Tensor]
    losses: list[float]
    skipped: int


def run_sft(cfg: ModelConfig, params: dict[str, Tensor],
            dataset: list[tuple[str, str, str]], tok: BbpeModel,
            sft: SftConfig, rng: np.random.Generator) -> SftResult:
    """Fine-tune `params` in place on (prompt, response, mode) records."""
    states = init_router_states(cfg)
    rendered = []
    skipped = 0
    for prompt, response, mode in dataset:
        r = render_sample(tok, prompt, response, mode)
        if r is None:
            skipped += 1
            continue
        rendered.append(r)
    if not rendered:
        raise ConfigError("no usable SFT samples after rendering")
    opt = AdamWParams(weight_decay=sft.weight_decay)
    pad_id = tok.token_id(PAD)
    losses = []
    for _ in range(sft.steps):
        pick = rng.integers(0, len(rendered), size=min(sft.batch_size, len(rendered)))
        batch = [rendered[i] for i in pick]
        loss = sft_loss(cfg, params, states, batch, pad_id)
        zero_grads(params)
        loss.backward()
        clip_grad_norm(params, sft.grad_clip)
        adamw_step(params, opt, sft.lr)
        losses.append(loss.item())
    return SftResult(params=params, losses=losses, skipped=skipped)


# ---------------------------------------------------------------------------
# Generation-side evaluation
# ---------------------------------------------------------------------------

def respond(cfg: ModelConfig, params, states, tok: BbpeModel, instruction: str,
            mode: str, rng: np.random.Generator | None, max_new_tokens: int = 32,
            temperature: float = 1.0) -> str:
    """Prompt with the mode's control tag and return the full response text
    (leading tag included) for validation and answer extraction."""
    lead = OPEN_TAG if mode == THINK else CLOSE_TAG
    prompt_ids = tok.encode(instruction) + [tok.token_id(lead)]
    out_ids, _ = generate(cfg, params, states, prompt_ids, max_new_tokens,
                          rng=rng, temperature=temperature,
                          eos_id=tok.token_id(EOS))
    return lead + tok.decode(out_ids)


def format_violation_rate(cfg: ModelConfig, params, states, tok: BbpeModel,
                          instructions: list[str], rng: np.random.Generator,
                          max_new_tokens: int = 32, temperature: float = 1.0,
                          modes: tuple[str, ...] = MODES) -> dict[str, float]:
    """Fraction of generations violating their mode's format, per mode."""
    rates = {}
    for mode in modes:
        bad = 0
        for instruction in instructions:
            text = respond(cfg, params, states, tok, instruction, mode, rng,
                           max_new_tokens, temperature)
            if not validate_mode_format(text, mode).valid:
                bad += 1
        rates[mode] = bad / max(1, len(instructions))
    return rates


# ---------------------------------------------------------------------------
# the full desk-scale pipeline
# ---------------------------------------------------------------------------

@dataclass
class FusionExperiment:
    """Artifacts of one dual-SFT -> merge -> mode-overlap-SFT run."""

    cfg: ModelConfig
    tokenizer: BbpeModel
    merged: Checkpoint
    fused: Checkpoint
    raw_rates: dict[str, float]
    fused_rates: dict[str, float]
    held_out: list[str]

    @property
    def raw_violation_rate(self) -> float:
        return sum(self.raw_rates.values()) / len(self.raw_rates)

    @property
    def fused_violation_rate(self) -> float:
        return sum(self.fused_rates.values()) / len(self.fused_rates)


def default_fusion_config() -> ModelConfig:
    return ModelConfig(n_layers=2, d_model=24, n_heads=2, mla_kv_rank=8,
                       mla_q_rank=8, rope_dim=4, n_routed_experts=4, n_active=2,
                       n_shared_experts=1, d_expert=24, vocab_size=260,
                       max_seq=64, mtp_depth=0)


def think_fusion_experiment(seed: int, n_prompts: int = 160, alpha: float = 0.8,
                            track_steps: int = 120, mod_steps: int = 220,
                            n_held_out: int = 25,
                            cfg: ModelConfig | None = None) -> FusionExperiment:
    """Run the whole recipe on the synthetic task suite.

    Two tracks are fine-tuned from one shared initialization (reasoning-span
    responses vs direct responses), blended at `alpha`, measured for mode
    confusion on held-out prompts, then repaired with mode-overlap SFT and
    measured again. Deterministic given `seed`.
    """
    from .tasks import TASK_GENERATORS, arithmetic_instruction, echo_instruction

    cfg = cfg or default_fusion_config()
    tok = BbpeModel()
    rng = np.random.default_rng(seed)
    base = init_params_shared(cfg, rng)
    dataset = build_mod_dataset(n_prompts, TASK_GENERATORS,
                                {"math": 60, "general": 40}, rng)

    track_cfg = SftConfig(steps=track_steps, batch_size=8, lr=3e-3)
    think_params = _clone(base)
    run_sft(cfg, think_params, dataset.think, tok, track_cfg,
            np.random.default_rng(seed + 1))
    nonthink_params = _clone(base)
    run_sft(cfg, nonthink_params, dataset.nonthink, tok, track_cfg,
            np.random.default_rng(seed + 2))

    merged = merge_checkpoints(MergeSpec(
        alpha, Checkpoint.from_params(think_params, cfg),
        Checkpoint.from_params(nonthink_params, cfg)))

    held_rng = np.random.default_rng(seed + 3)
    n_math = (n_held_out * 3) // 5
    held = [arithmetic_instruction(held_rng).instruction for _ in range(n_math)]
    held += [echo_instruction(held_rng).instruction for _ in range(n_held_out - n_math)]

    states = init_router_states(cfg)
    raw_params = merged.to_tensors()
    raw_rates = format_violation_rate(cfg, raw_params, states, tok, held,
                                      np.random.default_rng(seed + 4),
                                      max_new_tokens=28)

    fused_params = merged.to_tensors()
    run_sft(cfg, fused_params, dataset.mix, tok,
            SftConfig(steps=mod_steps, batch_size=8, lr=2e-3),
            np.random.default_rng(seed + 5))
    fused_rates = format_violation_rate(cfg, fused_params, states, tok, held,
                                        np.random.default_rng(seed + 6),
                                        max_new_tokens=28)
    return FusionExperiment(cfg=cfg, tokenizer=tok, merged=merged,
                            fused=Checkpoint.from_params(fused_params, cfg),
                            raw_rates=raw_rates, fused_rates=fused_rates,
                            held_out=held)


def init_params_shared(cfg: ModelConfig, rng: np.random.Generator):
    from .model import init_params

    return init_params(cfg, rng, init_std=0.08)


def _clone(params):
    return {k: Tensor(np.array(v.data), requires_grad=True) for k, v in params.items()}

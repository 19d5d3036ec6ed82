"""The transformer block at configurable (toy) scale.

Each layer is a pre-norm latent-attention residual followed by a
dual-normed mixture-of-experts residual:

    x = x + attn(rmsnorm(x))
    x = x + rmsnorm_post( shared(h) + scale * sum_i w_i * expert_i(h) ),
        h = rmsnorm_pre(x)

Attention compresses queries and keys/values through low-rank latents; the
decode cache stores only the per-token KV latent plus a small decoupled
rotary key, not full keys/values. Routing scores experts with a sigmoid,
selects top-k on (affinity + bias) where the bias is adjusted online to
balance load (and never enters the mixture weights), and normalizes the
selected raw affinities to sum to one. An optional depth-1 multi-token
head predicts position t+2 from the trunk state at t and the embedding of
the token at t+1, sharing the embedding table and output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, StateError
from .tensor import Tensor

ROPE_BASE = 10_000.0


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    mla_kv_rank: int = 8
    mla_q_rank: int = 8
    rope_dim: int = 4
    n_routed_experts: int = 4
    n_active: int = 2
    n_shared_experts: int = 1
    d_expert: int = 32
    vocab_size: int = 260
    max_seq: int = 64
    mtp_depth: int = 1
    routed_scaling_factor: float = 2.5
    rmsnorm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_active > self.n_routed_experts:
            raise ConfigError("n_active must be <= n_routed_experts")
        if self.mtp_depth not in (0, 1):
            raise ConfigError("mtp_depth must be 0 or 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.rope_dim % 2 != 0:
            raise ConfigError("rope_dim must be even")
        for name in ("n_layers", "d_model", "n_heads", "mla_kv_rank", "mla_q_rank",
                     "rope_dim", "n_routed_experts", "n_active", "d_expert",
                     "vocab_size", "max_seq"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ModelConfig.{name} must be > 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class RouterState:
    """Per-layer routing state: selection-only bias and balance bookkeeping."""

    bias: np.ndarray
    bias_update_rate: float = 1e-3
    aux_coefficient: float = 1e-4
    cumulative_load: np.ndarray = field(default=None)

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not np.isfinite(self.bias).all():
            raise ConfigError("router bias must be finite")
        if self.bias_update_rate < 0 or self.aux_coefficient < 0:
            raise ConfigError("router rates must be >= 0")
        if self.cumulative_load is None:
            self.cumulative_load = np.zeros(len(self.bias), dtype=np.int64)


def init_router_states(cfg: ModelConfig, bias_update_rate: float = 1e-3,
                       aux_coefficient: float = 1e-4) -> list[RouterState]:
    return [RouterState(np.zeros(cfg.n_routed_experts), bias_update_rate, aux_coefficient)
            for _ in range(cfg.n_layers)]


class KvCache:
    """Per-layer compressed attention state for incremental decoding.

    Stores, for each layer, the normalized KV latents (batch, seq, kv_rank)
    and the shared rotary keys (batch, seq, rope_dim) of all past tokens.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.latents: list[np.ndarray | None] = [None] * cfg.n_layers
        self.rotary_keys: list[np.ndarray | None] = [None] * cfg.n_layers

    def seq_len(self, layer: int = 0) -> int:
        lat = self.latents[layer]
        return 0 if lat is None else lat.shape[1]

    def append(self, layer: int, latent: np.ndarray, rotary: np.ndarray) -> None:
        if latent.shape[:2] != rotary.shape[:2]:
            raise StateError("cache latent/rotary length mismatch")
        if self.latents[layer] is None:
            self.latents[layer] = latent
            self.rotary_keys[layer] = rotary
        else:
            if self.latents[layer].shape[0] != latent.shape[0]:
                raise StateError("cache batch size changed")
            self.latents[layer] = np.concatenate([self.latents[layer], latent], axis=1)
            self.rotary_keys[layer] = np.concatenate([self.rotary_keys[layer], rotary], axis=1)
        if self.seq_len(layer) > self.cfg.max_seq:
            raise StateError(f"cache exceeds max_seq {self.cfg.max_seq}")

    def check_consistent(self) -> None:
        lengths = {self.seq_len(i) for i in range(self.cfg.n_layers)}
        if len(lengths) != 1:
            raise StateError(f"cache layers out of sync: lengths {sorted(lengths)}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float64, init_std: float = 0.02) -> dict[str, Tensor]:
    """Fresh parameter tree; matrices ~ N(0, init_std), gains 1, biases 0."""
    p: dict[str, Tensor] = {}

    def mat(name, *shape):
        p[name] = Tensor(rng.normal(0.0, init_std, size=shape).astype(dtype),
                         requires_grad=True)

    def gain(name, n):
        p[name] = Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    d, dh, dr = cfg.d_model, cfg.head_dim, cfg.rope_dim
    mat("embed.weight", cfg.vocab_size, d)
    for i in range(cfg.n_layers):
        a = f"layers.{i}.attn"
        gain(f"{a}.norm_gain", d)
        mat(f"{a}.w_dq", d, cfg.mla_q_rank)
        gain(f"{a}.q_norm_gain", cfg.mla_q_rank)
        mat(f"{a}.w_uq", cfg.mla_q_rank, cfg.n_heads * dh)
        mat(f"{a}.w_qr", cfg.mla_q_rank, cfg.n_heads * dr)
        mat(f"{a}.w_dkv", d, cfg.mla_kv_rank)
        gain(f"{a}.kv_norm_gain", cfg.mla_kv_rank)
        mat(f"{a}.w_uk", cfg.mla_kv_rank, cfg.n_heads * dh)
        mat(f"{a}.w_uv", cfg.mla_kv_rank, cfg.n_heads * dh)
        mat(f"{a}.w_kr", d, dr)
        mat(f"{a}.w_o", cfg.n_heads * dh, d)
        m = f"layers.{i}.moe"
        gain(f"{m}.pre_gain", d)
        gain(f"{m}.post_gain", d)
        mat(f"{m}.router", d, cfg.n_routed_experts)
        for e in range(cfg.n_routed_experts):
            mat(f"{m}.experts.{e}.w_gate", d, cfg.d_expert)
            mat(f"{m}.experts.{e}.w_up", d, cfg.d_expert)
            mat(f"{m}.experts.{e}.w_down", cfg.d_expert, d)
        for s in range(cfg.n_shared_experts):
            mat(f"{m}.shared.{s}.w_gate", d, cfg.d_expert)
            mat(f"{m}.shared.{s}.w_up", d, cfg.d_expert)
            mat(f"{m}.shared.{s}.w_down", cfg.d_expert, d)
    if cfg.mtp_depth == 1:
        gain("mtp.h_norm_gain", d)
        gain("mtp.e_norm_gain", d)
        mat("mtp.w_combine", 2 * d, d)
    gain("final_norm.gain", d)
    mat("head.weight", d, cfg.vocab_size)
    p["head.bias"] = Tensor(np.zeros(cfg.vocab_size, dtype=dtype), requires_grad=True)
    return p


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.zero_grad()


# ---------------------------------------------------------------------------
# Rotary positions
# ---------------------------------------------------------------------------

def _rope_tables(positions: np.ndarray, rope_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = rope_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / rope_dim)
    angles = positions[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate pairs (x[..., :h], x[..., h:]) by per-position angles."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    return T.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


# ---------------------------------------------------------------------------
# Latent attention
# ---------------------------------------------------------------------------

def mla_attention(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                  layer: int, cache: KvCache | None = None) -> Tensor:
    """Causal low-rank attention over (batch, seq, d_model) states.

    With a cache, `x` holds only the new tokens; their latents are appended
    and the result equals recomputing the full sequence.
    """
    if x.ndim != 3 or x.shape[2] != cfg.d_model:
        raise ShapeError(f"attention input must be (B, T, {cfg.d_model}), got {x.shape}")
    a = f"layers.{layer}.attn"
    B, T_new, _ = x.shape
    H, dh, dr = cfg.n_heads, cfg.head_dim, cfg.rope_dim
    past = cache.seq_len(layer) if cache is not None else 0
    positions = np.arange(past, past + T_new, dtype=np.float64)
    cos, sin = _rope_tables(positions, dr, x.dtype)

    cq = T.rmsnorm(T.matmul(x, params[f"{a}.w_dq"]), params[f"{a}.q_norm_gain"],
                   cfg.rmsnorm_eps)
    q_nope = _split_heads(T.matmul(cq, params[f"{a}.w_uq"]), H, dh)      # (B,H,T,dh)
    q_rope = _apply_rope(_split_heads(T.matmul(cq, params[f"{a}.w_qr"]), H, dr), cos, sin)

    ckv_new = T.rmsnorm(T.matmul(x, params[f"{a}.w_dkv"]), params[f"{a}.kv_norm_gain"],
                        cfg.rmsnorm_eps)                                  # (B,T,rkv)
    kr_new = _apply_rope(T.matmul(x, params[f"{a}.w_kr"]), cos, sin)      # (B,T,dr)

    if cache is not None:
        if past > 0 and cache.latents[layer].shape[0] != B:
            raise StateError("cache batch size does not match input")
        old_ckv, old_kr = cache.latents[layer], cache.rotary_keys[layer]
        cache.append(layer, np.asarray(ckv_new.data), np.asarray(kr_new.data))
        if past > 0:
            ckv = T.concat([Tensor(old_ckv), ckv_new], axis=1)
            kr = T.concat([Tensor(old_kr), kr_new], axis=1)
        else:
            ckv, kr = ckv_new, kr_new
    else:
        ckv, kr = ckv_new, kr_new

    S = past + T_new
    k_nope = _split_heads(T.matmul(ckv, params[f"{a}.w_uk"]), H, dh)      # (B,H,S,dh)
    v = _split_heads(T.matmul(ckv, params[f"{a}.w_uv"]), H, dh)           # (B,H,S,dh)
    kr_b = T.reshape(kr, (B, 1, S, dr))                                   # shared across heads

    scores = T.matmul(q_nope, T.transpose(k_nope)) + T.matmul(q_rope, T.transpose(kr_b))
    scores = scores * (1.0 / math.sqrt(dh + dr))                          # (B,H,T,S)
    mask = np.zeros((T_new, S), dtype=x.dtype)
    rows, cols = np.indices((T_new, S))
    mask[cols > rows + past] = -1e30
    attn = T.softmax(scores + Tensor(mask), axis=-1)
    out = T.matmul(attn, v)                                               # (B,H,T,dh)
    out = T.reshape(T.transpose(out, 1, 2), (B, T_new, H * dh))
    return T.matmul(out, params[f"{a}.w_o"])


def _split_heads(t: Tensor, n_heads: int, dim: int) -> Tensor:
    B, S = t.shape[0], t.shape[1]
    return T.transpose(T.reshape(t, (B, S, n_heads, dim)), 1, 2)


# ---------------------------------------------------------------------------
# Expert routing
# ---------------------------------------------------------------------------

def route_topk(affinities, state: RouterState, k: int):
    """Select top-k experts by (affinity + bias); weight by raw affinity.

    Returns (indices, weights) for a single affinity vector. The bias only
    shifts selection scores; weights are the selected raw affinities
    normalized to sum to one. Ties go to the lowest expert index.
    """
    aff = np.asarray(affinities, dtype=np.float64)
    if aff.ndim != 1 or len(aff) != len(state.bias):
        raise ShapeError(f"affinities must be a vector of {len(state.bias)} scores")
    if not np.isfinite(aff).all():
        raise ConfigError("affinities must be finite")
    if k > len(aff):
        raise ConfigError(f"k={k} exceeds {len(aff)} experts")
    order = np.argsort(-(aff + state.bias), kind="stable")
    idx = np.sort(order[:k])
    weights = aff[idx] / aff[idx].sum()
    return idx, weights


def _select_topk_batch(aff_data: np.ndarray, bias: np.ndarray, k: int) -> np.ndarray:
    """Boolean (N, E) selection mask; same rules as route_topk per row."""
    order = np.argsort(-(aff_data + bias[None, :]), axis=-1, kind="stable")
    mask = np.zeros(aff_data.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=-1)
    return mask


def moe_layer(x: Tensor, params: dict[str, Tensor], state: RouterState,
              cfg: ModelConfig, layer: int):
    """Dual-normed mixture-of-experts residual.

    Returns (output, per-expert routed token counts, auxiliary balance loss).
    Gradients flow through the mixture weights and the balance loss but not
    through the discrete selection.
    """
    if x.ndim != 3 or x.shape[2] != cfg.d_model:
        raise ShapeError(f"moe input must be (B, T, {cfg.d_model}), got {x.shape}")
    m = f"layers.{layer}.moe"
    B, S, d = x.shape
    N = B * S
    h = T.rmsnorm(x, params[f"{m}.pre_gain"], cfg.rmsnorm_eps)
    h_flat = T.reshape(h, (N, d))

    affinity = T.sigmoid(T.matmul(h_flat, params[f"{m}.router"]))          # (N,E)
    sel = _select_topk_batch(affinity.data, state.bias, cfg.n_active)
    sel_aff = affinity * Tensor(sel.astype(x.dtype))
    weights = sel_aff * T.pow_(T.sum_(sel_aff, axis=-1, keepdims=True), -1.0)

    combined = _ffn(h_flat, params, f"{m}.shared.0") if cfg.n_shared_experts else None
    for s in range(1, cfg.n_shared_experts):
        combined = combined + _ffn(h_flat, params, f"{m}.shared.{s}")
    # routed dispatch: gather each expert's tokens, scatter weighted outputs back

    routed = None
    loads = np.zeros(cfg.n_routed_experts, dtype=np.int64)
    for e in range(cfg.n_routed_experts):
        tok = np.nonzero(sel[:, e])[0]
        loads[e] = len(tok)
        if len(tok) == 0:
            continue
        rows = h_flat[tok]
        out_rows = _ffn(rows, params, f"{m}.experts.{e}")
        w_e = T.reshape(weights[tok, e], (len(tok), 1))
        contribution = T.scatter_rows(out_rows * w_e, tok, N)
        routed = contribution if routed is None else routed + contribution
    if routed is not None:
        routed = routed * cfg.routed_scaling_factor
        combined = routed if combined is None else combined + routed
    if combined is None:
        combined = Tensor(np.zeros((N, d), dtype=x.dtype))

    y = x + T.reshape(T.rmsnorm(combined, params[f"{m}.post_gain"], cfg.rmsnorm_eps),
                      (B, S, d))

    # balance term: fraction routed x mean normalized affinity, scaled so a
    # perfectly uniform router scores exactly aux_coefficient
    frac = loads / (cfg.n_active * N)
    p_norm = affinity * T.pow_(T.sum_(affinity, axis=-1, keepdims=True), -1.0)
    mean_affinity = T.mean(p_norm, axis=0)
    aux = T.sum_(mean_affinity * Tensor(frac.astype(x.dtype)))
    aux = aux * (state.aux_coefficient * cfg.n_routed_experts)
    return y, loads, aux


def _ffn(rows: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    gate = T.silu(T.matmul(rows, params[f"{prefix}.w_gate"]))
    up = T.matmul(rows, params[f"{prefix}.w_up"])
    return T.matmul(gate * up, params[f"{prefix}.w_down"])


def update_router_bias(state: RouterState, batch_loads) -> RouterState:
    """Nudge each expert's selection bias down/up by the update rate
    according to the sign of its load excess; rate 0 leaves bias unchanged."""
    loads = np.asarray(batch_loads, dtype=np.float64)
    if (loads < 0).any():
        raise ConfigError("loads must be non-negative")
    new_bias = state.bias - state.bias_update_rate * np.sign(loads - loads.mean())
    return RouterState(
        bias=new_bias,
        bias_update_rate=state.bias_update_rate,
        aux_coefficient=state.aux_coefficient,
        cumulative_load=state.cumulative_load + loads.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Multi-token head and full forward
# ---------------------------------------------------------------------------

def mtp_head(h: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
             tokens: np.ndarray) -> Tensor | None:
    """Depth-1 future-token logits: position t predicts token t+2.

    `h` is the final-normed trunk state; the head mixes it with the
    embedding of token t+1 and reuses the main output projection.
    Returns None when disabled or the sequence is too short.
    """
    if cfg.mtp_depth == 0:
        return None
    S = tokens.shape[1]
    if S < 3:
        return None
    h_part = h[:, : S - 2]
    e_part = T.embedding(params["embed.weight"], tokens[:, 1 : S - 1])
    combined = T.concat([
        T.rmsnorm(h_part, params["mtp.h_norm_gain"], cfg.rmsnorm_eps),
        T.rmsnorm(e_part, params["mtp.e_norm_gain"], cfg.rmsnorm_eps),
    ], axis=-1)
    mixed = T.matmul(combined, params["mtp.w_combine"])
    return T.matmul(mixed, params["head.weight"]) + params["head.bias"]


@dataclass
class ForwardResult:
    logits: Tensor                      # (B, T, vocab)
    mtp_logits: Tensor | None           # (B, T-2, vocab) or None
    aux_losses: list[Tensor]            # one balance loss per layer
    load_stats: np.ndarray              # (n_layers, n_experts) int counts


def model_forward(tokens, cfg: ModelConfig, params: dict[str, Tensor],
                  states: list[RouterState], cache: KvCache | None = None) -> ForwardResult:
    """Embed -> n_layers x (attention residual, MoE residual) -> norm -> head."""
    ids = np.asarray(tokens)
    if ids.ndim != 2:
        raise ShapeError(f"tokens must be (batch, seq), got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    if len(states) != cfg.n_layers:
        raise ConfigError(f"need {cfg.n_layers} router states, got {len(states)}")
    if cache is not None:
        cache.check_consistent()

    x = T.embedding(params["embed.weight"], ids)
    aux_losses: list[Tensor] = []
    load_stats = np.zeros((cfg.n_layers, cfg.n_routed_experts), dtype=np.int64)
    for i in range(cfg.n_layers):
        normed = T.rmsnorm(x, params[f"layers.{i}.attn.norm_gain"], cfg.rmsnorm_eps)
        x = x + mla_attention(normed, params, cfg, i, cache)
        x, loads, aux = moe_layer(x, params, states[i], cfg, i)
        load_stats[i] = loads
        aux_losses.append(aux)
    x = T.rmsnorm(x, params["final_norm.gain"], cfg.rmsnorm_eps)
    logits = T.matmul(x, params["head.weight"]) + params["head.bias"]
    mtp_logits = mtp_head(x, params, cfg, ids) if cache is None else None
    return ForwardResult(logits, mtp_logits, aux_losses, load_stats)


def generate(cfg: ModelConfig, params: dict[str, Tensor], states: list[RouterState],
             prompt_ids: list[int], max_new_tokens: int,
             rng: np.random.Generator | None = None, temperature: float = 1.0,
             eos_id: int | None = None) -> tuple[list[int], list[float]]:
    """Sample a continuation with the decode cache.

    Returns (generated ids, temperature-1 policy log-probabilities of each
    emitted token), so importance ratios can be formed later regardless of
    the sampling temperature. `rng=None` or temperature 0 decodes greedily.
    """
    if not prompt_ids:
        raise ConfigError("prompt must be nonempty")
    cache = KvCache(cfg)
    out_ids: list[int] = []
    logps: list[float] = []
    current = np.asarray([prompt_ids], dtype=np.int64)
    for _ in range(max_new_tokens):
        result = model_forward(current, cfg, params, states, cache)
        logits = np.asarray(result.logits.data[0, -1], dtype=np.float64)
        logprobs = logits - _logsumexp(logits)
        if rng is None or temperature == 0.0:
            nxt = int(np.argmax(logprobs))
        else:
            scaled = logits / temperature
            probs = np.exp(scaled - _logsumexp(scaled))
            probs /= probs.sum()
            nxt = int(rng.choice(len(probs), p=probs))
        out_ids.append(nxt)
        logps.append(float(logprobs[nxt]))
        if eos_id is not None and nxt == eos_id:
            break
        current = np.asarray([[nxt]], dtype=np.int64)
    return out_ids, logps


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))

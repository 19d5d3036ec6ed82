"""Declarative run configuration: one JSON document per run.

Every command reads its own section out of the same document. Validation
is strict and total: unknown keys, type mismatches, a missing seed, and
missing referenced files are all collected and reported together in one
error rather than one at a time.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .planner import PlanInputs
from .schedule import BatchRamp, StageMixture, WsdSchedule, stage_params
from .trainer import StagePlan


@dataclass
class StageSpec:
    """JSON-side shape of one curriculum stage."""

    stage: int
    steps: int
    seq_len: int
    mtp_lambda: float | None = None
    bias_update_rate: float | None = None
    weights: dict | None = None

    def to_plan(self) -> StagePlan:
        defaults = stage_params(self.stage, base_seq=self.seq_len,
                                extended_seq=self.seq_len)
        lam = self.mtp_lambda if self.mtp_lambda is not None else defaults.mtp_lambda
        rate = (self.bias_update_rate if self.bias_update_rate is not None
                else defaults.bias_update_rate)
        mixture = None
        if self.weights is not None:
            mixture = StageMixture(self.stage, dict(self.weights), self.seq_len,
                                   lam, rate)
        return StagePlan(stage=self.stage, steps=self.steps, seq_len=self.seq_len,
                         mtp_lambda=lam, bias_update_rate=rate, mixture=mixture)


@dataclass
class TrainSection:
    corpus: str = "copy_task"
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    init_std: float = 0.02
    dtype: str = "wide"


@dataclass
class FusionSection:
    alpha: float = 0.8
    n_prompts: int = 160
    track_steps: int = 120
    mod_steps: int = 220
    n_held_out: int = 25


@dataclass
class RlSection:
    iterations: int = 100
    group_size: int = 8
    prompts_per_iter: int = 2
    clip_low: float = 0.2
    clip_high: float = 0.28
    advantage_eps: float = 1e-6
    dynamic_sampling: bool = True
    max_new_tokens: int = 24
    temperature: float = 1.0
    lr: float = 1e-3
    task: str = "small_sum"


@dataclass
class TokenizerSection:
    target_vocab: int = 384
    corpus_file: str | None = None
    corpus_inline: list = field(default_factory=list)


@dataclass
class EvalSection:
    tokenizer_file: str = ""
    datasets: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    seed: int
    out_dir: str = "runs/out"
    plan: PlanInputs | None = None
    model: ModelConfig | None = None
    schedule: WsdSchedule | None = None
    ramp: BatchRamp | None = None
    stages: list[StageSpec] | None = None
    train: TrainSection | None = None
    fusion: FusionSection | None = None
    rl: RlSection | None = None
    tokenizer: TokenizerSection | None = None
    eval: EvalSection | None = None


_SECTION_TYPES = {
    "plan": PlanInputs,
    "model": ModelConfig,
    "schedule": WsdSchedule,
    "ramp": BatchRamp,
    "train": TrainSection,
    "fusion": FusionSection,
    "rl": RlSection,
    "tokenizer": TokenizerSection,
    "eval": EvalSection,
}

_PRIMITIVES = {int, float, str, bool, dict, list}


def _coerce(value, annotation, where: str, errors: list[str]):
    """Check a JSON value against a field annotation (optional primitives)."""
    targets = set()
    text = str(annotation)
    if "int" in text:
        targets.add(int)
    if "float" in text:
        targets.add(float)
    if "str" in text:
        targets.add(str)
    if "bool" in text:
        targets.add(bool)
    if "dict" in text:
        targets.add(dict)
    if "list" in text:
        targets.add(list)
    if value is None:
        if "None" in text:
            return None
        errors.append(f"{where}: null is not allowed")
        return None
    if bool in targets and isinstance(value, bool):
        return value
    if isinstance(value, bool) and bool not in targets:
        errors.append(f"{where}: expected {annotation}, got a boolean")
        return None
    if int in targets and isinstance(value, int):
        return value
    if float in targets and isinstance(value, (int, float)):
        return float(value)
    if str in targets and isinstance(value, str):
        return value
    if dict in targets and isinstance(value, dict):
        return value
    if list in targets and isinstance(value, list):
        return value
    errors.append(f"{where}: expected {annotation}, got {type(value).__name__}")
    return None


def _build(cls, data, where: str, errors: list[str]):
    if not isinstance(data, dict):
        errors.append(f"{where}: expected an object")
        return None
    start = len(errors)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            errors.append(f"{where}.{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            if (f.default is dataclasses.MISSING
                    and f.default_factory is dataclasses.MISSING):
                errors.append(f"{where}.{name}: missing required key")
            continue
        kwargs[name] = _coerce(data[name], f.type, f"{where}.{name}", errors)
    if len(errors) > start:
        return None
    try:
        return cls(**kwargs)
    except (ConfigError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def parse_config(path) -> RunConfig:
    """Load and fully validate a run document, or raise one ConfigError
    naming every violation."""
    errors: list[str] = []
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")

    known = {"seed", "out_dir", "stages"} | set(_SECTION_TYPES)
    for key in doc:
        if key not in known:
            errors.append(f"{key}: unknown key")
    if "seed" not in doc:
        errors.append("seed: missing required key")
    elif not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
        errors.append("seed: must be an integer")
    out_dir = doc.get("out_dir", "runs/out")
    if not isinstance(out_dir, str):
        errors.append("out_dir: must be a string")

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        if name in doc:
            sections[name] = _build(cls, doc[name], name, errors)
    stages = None
    if "stages" in doc:
        if not isinstance(doc["stages"], list):
            errors.append("stages: must be a list")
        else:
            stages = []
            for i, item in enumerate(doc["stages"]):
                built = _build(StageSpec, item, f"stages[{i}]", errors)
                if built is not None:
                    stages.append(built)

    # referenced files must exist up front
    tok = sections.get("tokenizer")
    if tok is not None and tok.corpus_file and not os.path.exists(tok.corpus_file):
        errors.append(f"tokenizer.corpus_file: no such file {tok.corpus_file!r}")
    ev = sections.get("eval")
    if ev is not None and ev.tokenizer_file and not os.path.exists(ev.tokenizer_file):
        errors.append(f"eval.tokenizer_file: no such file {ev.tokenizer_file!r}")

    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(sorted(set(errors))))
    return RunConfig(seed=doc["seed"], out_dir=out_dir, stages=stages, **sections)


def emit_config(cfg: RunConfig) -> str:
    """Canonical JSON for a RunConfig; parse(emit(x)) == x."""
    doc: dict = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for name in _SECTION_TYPES:
        value = getattr(cfg, name)
        if value is not None:
            doc[name] = dataclasses.asdict(value)
    if cfg.stages is not None:
        doc["stages"] = [dataclasses.asdict(s) for s in cfg.stages]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"

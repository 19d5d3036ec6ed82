"""moekit: a desk-scale training recipe for fine-grained MoE transformers.

Submodules cover configuration planning, an autodiff tensor core with FP8
simulation, the transformer block (latent attention + routed experts +
multi-token head), WSD/curriculum scheduling, AdamW pre-training, hybrid
thinking/non-thinking post-training (checkpoint merging + mode-overlap
SFT), sequence-level clipped-policy RL, and a byte-level BPE tokenizer.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .fp8 import Fp8Format, Fp8Spec, fp8_quantize
from .fusion import MergeSpec, merge_checkpoints, validate_mode_format
from .model import KvCache, ModelConfig, RouterState, model_forward
from .planner import PlanInputs, PlanResult, make_plan
from .rl import GspoConfig, gspo_loss, group_advantages, reward
from .schedule import BatchRamp, StageMixture, WsdSchedule, batch_at, lr_at
from .tensor import Tensor, grad_check
from .tokenizer import BbpeModel, bbpe_train, efficiency_eval
from .trainer import AdamWParams, adamw_step, total_loss, train_run

__version__ = "0.1.0"

__all__ = [
    "AdamWParams", "BatchRamp", "BbpeModel", "Checkpoint", "Fp8Format",
    "Fp8Spec", "GspoConfig", "KvCache", "MergeSpec", "ModelConfig",
    "PlanInputs", "PlanResult", "RouterState", "StageMixture", "Tensor",
    "WsdSchedule", "adamw_step", "batch_at", "bbpe_train", "efficiency_eval",
    "fp8_quantize", "grad_check", "group_advantages", "gspo_loss",
    "load_checkpoint", "lr_at", "make_plan", "merge_checkpoints",
    "model_forward", "reward", "save_checkpoint", "total_loss", "train_run",
    "validate_mode_format",
]

"""Session-wide fixtures for the expensive end-to-end pipelines.

The fused post-training model and the pinned 100-iteration RL run are
computed once and shared between the module tests and the acceptance
suite.
"""

import numpy as np
import pytest


@pytest.fixture(scope="session")
def fusion_exp():
    from moekit.fusion import think_fusion_experiment

    return think_fusion_experiment(seed=7, mod_steps=400)


@pytest.fixture(scope="session")
def pinned_rl_run(fusion_exp):
    from moekit.rl import GspoConfig, RlConfig, rl_run
    from moekit.tasks import small_sum_instruction

    params = fusion_exp.fused.to_tensors()
    rl_cfg = RlConfig(gspo=GspoConfig(group_size=8), iterations=100,
                      prompts_per_iter=2, max_new_tokens=24,
                      temperature=1.0, lr=1e-3)
    out = rl_run(fusion_exp.cfg, params, fusion_exp.tokenizer,
                 small_sum_instruction, rl_cfg, seed=505)
    out["rollouts_per_iter_per_mode"] = 2 * 8
    return out

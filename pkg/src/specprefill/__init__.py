"""Training-free speculative prefill on a desk-scale transformer.

A small speculator model scores prompt tokens through its attention, the
highest-scoring chunks are kept with their original position ids, and a
larger base model prefills only those. Also bundled: a closed-form FLOPS
model and a constant-QPS serving simulator.
"""

from .analytic import (
    FlopsProfile,
    flops_profile,
    overhead,
    relative_flops,
    speedup_from_configs,
    speedup_upper_bound,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, ModelConfig, get_preset
from .model import (
    AttentionTensor,
    CapturedQueries,
    KVCache,
    Model,
    attention_scores,
    decode_step,
    init_model,
    prefill,
)
from .speculation import (
    Request,
    RequestBatch,
    SpecConfig,
    SpeculatedPrompt,
    compute_token_importance,
    generate,
    generate_with_spec,
    look_ahead,
    restore_position_ids,
    select_chunks,
    smooth_scores,
    speculate_prefill,
    speculate_prompt,
)

__version__ = "0.1.0"

__all__ = [
    "attention_scores",
    "AttentionTensor",
    "CapturedQueries",
    "compute_token_importance",
    "decode_step",
    "flops_profile",
    "FlopsProfile",
    "generate",
    "generate_with_spec",
    "get_preset",
    "init_model",
    "KVCache",
    "load_checkpoint",
    "look_ahead",
    "Model",
    "ModelConfig",
    "overhead",
    "PRESETS",
    "prefill",
    "relative_flops",
    "Request",
    "RequestBatch",
    "restore_position_ids",
    "save_checkpoint",
    "select_chunks",
    "smooth_scores",
    "SpecConfig",
    "speculate_prefill",
    "speculate_prompt",
    "SpeculatedPrompt",
    "speedup_from_configs",
    "speedup_upper_bound",
]

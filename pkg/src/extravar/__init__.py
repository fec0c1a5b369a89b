"""Stage-aware RoPE remapping and entropy-driven attention calibration for a
toy scale-wise autoregressive transformer."""

from .attention import (
    AttentionStats,
    CalibrationPolicy,
    HeadTensors,
    attend,
    closed_form_alpha,
    entropy_slope,
    gated_alpha,
    global_variance,
    logits,
    normalized_entropy,
    scaled_attention,
)
from .model import GenerationPlan, GenerationTrace, KvCache, ModelConfig, ToyVAR, generate, make_plan
from .reference import ReferenceEntropyStore, capture_reference
from .rope import (
    Band,
    FrequencyTable,
    RopeConfig,
    StageSchedule,
    assign_bands,
    build_frequency_table,
    stage_remap,
    stage_weight,
)

__version__ = "0.1.0"

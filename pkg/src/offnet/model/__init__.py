from .checkpoint import (
    CheckpointError,
    checkpoint_bytes,
    load_checkpoint,
    load_state,
    read_checkpoint_bytes,
    save_checkpoint,
)
from .config import ConfigError, ModelConfig, toy_config
from .layers import Module
from .network import (
    FusionOutput,
    OFFNet,
    StageFeatures,
    attention_scale,
    bce_loss,
    build_model,
    count_parameters,
    cross_attention_fuse,
    decode,
    efficient_self_attention,
    encode,
    encoder_stage,
    forward,
    mix_ffn,
    patch_embed,
    traversable_probability,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "FusionOutput",
    "ModelConfig",
    "Module",
    "OFFNet",
    "StageFeatures",
    "attention_scale",
    "bce_loss",
    "build_model",
    "checkpoint_bytes",
    "count_parameters",
    "cross_attention_fuse",
    "decode",
    "efficient_self_attention",
    "encode",
    "encoder_stage",
    "forward",
    "load_checkpoint",
    "load_state",
    "mix_ffn",
    "patch_embed",
    "read_checkpoint_bytes",
    "save_checkpoint",
    "toy_config",
    "traversable_probability",
]

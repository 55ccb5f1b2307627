"""Micro encoder-decoder models: transformer and dynamic-convolution variants
with forward pass, label-smoothed loss, beam search and R2L target handling.
"""

from .checkpoint import (
    Checkpoint,
    checkpoint_id,
    load_checkpoint,
    new_checkpoint,
    save_checkpoint,
)
from .config import ModelConfig, PRESETS, parameter_count, parameter_shapes, preset_config
from .decode import Translator, beam_decode, beam_search
from .network import (
    forward,
    init_parameters,
    label_smoothed_loss,
    reverse_target,
)

__all__ = [
    "Checkpoint",
    "ModelConfig",
    "PRESETS",
    "Translator",
    "beam_decode",
    "beam_search",
    "checkpoint_id",
    "forward",
    "init_parameters",
    "label_smoothed_loss",
    "load_checkpoint",
    "new_checkpoint",
    "parameter_count",
    "parameter_shapes",
    "preset_config",
    "reverse_target",
    "save_checkpoint",
]

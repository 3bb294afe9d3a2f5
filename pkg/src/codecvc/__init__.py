"""Two-stage codec language model for zero-shot, spontaneous-style voice cloning.

text -> semantic tokens -> delayed multi-codebook acoustic tokens, with
classifier-free guidance at both stages.
"""

__version__ = "0.1.0"

from .delay import DelayedGrid, apply_delay, head_targets, remove_delay
from .inference import (GuidanceConfig, blend_stage1, blend_stage2, concat_clips, generate_at, generate_st,
                        segment_text, synthesize)
from .model import BackboneConfig, CodecLM, ModelConfig, VoiceCloneLM
from .training import LossWeights, TrainConfig, Trainer, assemble_example, compute_loss, drop_conditions
from .vocab import (AcousticGrid, SemanticStream, TokenVocabulary, ValidationError, dedup_consecutive,
                    derive_frame_rate, validate_grid)

"""CLIP-guided cross-entropy (CLIP-CE) for detection in degraded scenes.

Subsystems: prompt-pair embeddings, AME/FAME object weights, CE / focal /
CLIP-CE losses, atmospheric-scattering haze synthesis, a desk-scale two-stage
detector with its training loop, and mAP@0.5 evaluation.
"""

from .ame import FocalParams, SimilarityPair, WeightRecord, ame_weight, focal_weight, similarity
from .embeddings import PromptPair, StubProvider, build_prompt_pair, make_provider
from .fame import adapter_loss, fame_weight, offset_weight, soft_label
from .haze import HazeSynthesizer, clamp_depth, compose_haze, estimate_atmospheric_light, transmission
from .losses import ClassificationOutput, ClipCeSchedule, ce_loss, clipce_loss, focal_loss

__version__ = "0.1.0"

__all__ = [
    "ClassificationOutput",
    "ClipCeSchedule",
    "FocalParams",
    "HazeSynthesizer",
    "PromptPair",
    "SimilarityPair",
    "StubProvider",
    "WeightRecord",
    "adapter_loss",
    "ame_weight",
    "build_prompt_pair",
    "ce_loss",
    "clamp_depth",
    "clipce_loss",
    "compose_haze",
    "estimate_atmospheric_light",
    "fame_weight",
    "focal_loss",
    "focal_weight",
    "make_provider",
    "offset_weight",
    "similarity",
    "soft_label",
    "transmission",
]

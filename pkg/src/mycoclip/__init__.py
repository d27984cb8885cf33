"""Synthetic fungal growth-stage images, captions and a contrastive dual encoder."""

from .morphology import StageClass, StageParams, default_stage_params

__all__ = ["StageClass", "StageParams", "default_stage_params"]
__version__ = "0.1.0"

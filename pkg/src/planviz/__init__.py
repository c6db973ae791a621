"""Planner/visualizer interleaved text-image generation on a closed scene world."""

from .core import (
    InterleavedSequence, Owner, ParseResult, SegKind, Segment,
    count_images, parse_interleaved, tokenize, detokenize,
)
from .masks import build_causal_mm_mask, build_dpcw_mask, oracle_mask
from .model import ModelConfig, ModelState, new_model, sample_image
from .rope3d import apply_rope, assign_positions, rope_angles
from .toyworld import SceneSpec, WorldCache, all_specs, render_scene

__version__ = "0.1.0"

__all__ = [
    "InterleavedSequence", "ModelConfig", "ModelState", "Owner",
    "ParseResult", "SceneSpec", "SegKind", "Segment", "WorldCache",
    "all_specs", "apply_rope", "assign_positions", "build_causal_mm_mask",
    "build_dpcw_mask", "count_images", "detokenize", "new_model",
    "oracle_mask", "parse_interleaved", "render_scene", "rope_angles",
    "sample_image", "tokenize",
]

"""3D rotary position embeddings for mixed text/image sequences.

Positions are (t, h, w): text tokens advance a planner-axis counter with
h = w = 0; all tokens of one image share the planner-axis index of the BOI
token that announced the image and carry their own patch-grid (h, w). The
channel dimension of a head is split into three contiguous equal thirds, one
per axis, each rotated with the standard interleaved-pair scheme.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .core import IMAGE_KINDS, LayoutError, Segment

ROPE_BASE = 10000.0


class WidthError(ValueError):
    """Head width must be divisible by 6 (three axes x pair rotation)."""


def assign_positions(segments: list[Segment]) -> np.ndarray:
    """Per-token (t, h, w) positions for a layout; (L, 3) int64.

    The planner counter advances once per text token (including BOI) and not
    at all across image blocks; image tokens of ordinal k inherit the t of the
    text position just before their first block (the BOI), clamped to 0 for
    layouts that open with an image block.
    """
    from .core import validate_segments

    total = validate_segments(segments)
    pos = np.zeros((total, 3), dtype=np.int64)
    counter = 0
    for seg in segments:
        if seg.kind in IMAGE_KINDS:
            side = math.isqrt(seg.length)
            if side * side != seg.length:
                raise LayoutError(
                    f"image segment length {seg.length} is not a square grid"
                )
            t = max(counter - 1, 0)
            grid = np.arange(seg.length)
            pos[seg.start:seg.end, 0] = t
            pos[seg.start:seg.end, 1] = grid // side
            pos[seg.start:seg.end, 2] = grid % side
        else:
            pos[seg.start:seg.end, 0] = np.arange(counter, counter + seg.length)
            counter += seg.length
    return pos


def rope_angles(positions: torch.Tensor, width: int,
                dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Precompute (cos, sin) tables of shape (..., L, width // 2).

    positions is (..., L, 3). Each axis owns a contiguous third of the channel
    dimension with the standard geometric frequency ladder, so the concatenated
    tables line up with interleaved even/odd pairs of the full width.
    """
    if width % 6 != 0:
        raise WidthError(f"rotary width must be divisible by 6, got {width}")
    third = width // 3
    half = third // 2
    device = positions.device
    inv_freq = ROPE_BASE ** (
        -torch.arange(half, dtype=dtype, device=device) * 2.0 / third
    )
    per_axis = [
        positions[..., a].to(dtype).unsqueeze(-1) * inv_freq for a in range(3)
    ]
    angles = torch.cat(per_axis, dim=-1)
    return torch.cos(angles), torch.sin(angles)


def rotate_pairs(x: torch.Tensor, cos: torch.Tensor,
                 sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved (even, odd) channel pairs by the given tables."""
    even, odd = x[..., 0::2], x[..., 1::2]
    out_even = even * cos - odd * sin
    out_odd = even * sin + odd * cos
    return torch.stack((out_even, out_odd), dim=-1).flatten(-2)


def apply_rope(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate per-token vectors (..., L, D) by their (t, h, w) positions.

    positions is (L, 3) or broadcastable to x's leading dims as (..., L, 3).
    Norm-preserving; identity at the origin.
    """
    cos, sin = rope_angles(positions, x.shape[-1], dtype=x.dtype)
    return rotate_pairs(x, cos, sin)

"""Attention mask construction.

Two builders over a segment layout — the generalized causal multimodal mask
and its DPCW (dense-prompt context window) restriction — plus an independent
O(L^2) predicate oracle used only by tests. Masks are explicit boolean
matrices: entry (i, j) is True iff position i may attend to position j.

Rules for the base mask:
  (a) within a TEXT/DENSE_PROMPT segment: token-level causal (i >= j);
  (b) within a VAE_NOISY block: fully bidirectional;
  (c) any token attends to all tokens of strictly earlier segments, EXCEPT
      planner-owned tokens never attend VAE_CLEAN or VAE_NOISY tokens (the
      planner reads images only through ViT tokens);
  (d) VIT_IMG and VAE_CLEAN blocks are internally bidirectional;
  (e) nothing attends to later segments.

DPCW, applied to the rows of the VAE_NOISY block that follows a dense span:
planner-text columns are restricted to the flat-position window
[dense.start - window_w, dense.last]; image columns stay visible only for the
given reference ordinals; every other row is untouched.
"""

from __future__ import annotations

import numpy as np

from .core import (
    IMAGE_KINDS,
    TEXT_KINDS,
    LayoutError,
    Owner,
    Segment,
    SegKind,
    validate_segments,
)


class SpanError(ValueError):
    """dense_span is not a DENSE_PROMPT segment of the layout."""


_LATENT_KINDS = (SegKind.VAE_CLEAN, SegKind.VAE_NOISY)


def _layout_arrays(segments: list[Segment]):
    """Per-position kind/owner/segment-start/ordinal arrays for vector rules."""
    total = validate_segments(segments)
    kind = np.empty(total, dtype=np.int8)
    owner = np.empty(total, dtype=np.int8)
    seg_start = np.empty(total, dtype=np.int64)
    ordinal = np.full(total, -1, dtype=np.int64)
    for seg in segments:
        sl = slice(seg.start, seg.end)
        kind[sl] = int(seg.kind)
        owner[sl] = int(seg.owner)
        seg_start[sl] = seg.start
        if seg.ordinal is not None:
            ordinal[sl] = seg.ordinal
    return total, kind, owner, seg_start, ordinal


def build_causal_mm_mask(segments: list[Segment]) -> np.ndarray:
    """Generalized causal multimodal mask for a layout; (L, L) bool."""
    total, kind, owner, seg_start, _ = _layout_arrays(segments)
    if total == 0:
        return np.zeros((0, 0), dtype=bool)

    idx = np.arange(total)
    same_seg = seg_start[:, None] == seg_start[None, :]
    is_text = np.isin(kind, [int(k) for k in TEXT_KINDS])
    # within one segment: causal for text kinds, bidirectional for image kinds
    within = np.where(is_text[None, :], idx[:, None] >= idx[None, :], True)
    # across segments: column segment strictly earlier, minus planner blindness
    earlier = seg_start[None, :] < seg_start[:, None]
    blind = (owner[:, None] == int(Owner.PLANNER)) & np.isin(
        kind, [int(k) for k in _LATENT_KINDS]
    )[None, :]
    return np.where(same_seg, within, earlier & ~blind)


def _find_noisy_block(segments: list[Segment], dense_span: Segment) -> Segment:
    for seg in segments:
        if seg.kind is SegKind.VAE_NOISY and seg.start >= dense_span.end:
            return seg
    raise SpanError("no VAE_NOISY block follows the dense span")


def build_dpcw_mask(
    segments: list[Segment],
    window_w: int,
    dense_span: Segment,
    reference_ordinals: tuple[int, ...] | list[int],
) -> np.ndarray:
    """Base mask with DPCW restriction on the noisy block following dense_span."""
    if window_w < 0:
        raise ValueError(f"window_w must be >= 0, got {window_w}")
    if not any(
        s.kind is SegKind.DENSE_PROMPT
        and s.start == dense_span.start
        and s.length == dense_span.length
        for s in segments
    ):
        raise SpanError(
            f"dense_span [{dense_span.start}, {dense_span.end}) is not a "
            "DENSE_PROMPT segment of the layout"
        )
    mask = build_causal_mm_mask(segments)
    noisy = _find_noisy_block(segments, dense_span)
    _, kind, _, _, ordinal = _layout_arrays(segments)

    cols = np.arange(mask.shape[1])
    is_text = np.isin(kind, [int(k) for k in TEXT_KINDS])
    in_window = (cols >= dense_span.start - window_w) & (cols <= dense_span.last)
    is_image = np.isin(kind, [int(k) for k in IMAGE_KINDS])
    is_ref = np.isin(ordinal, np.asarray(list(reference_ordinals), dtype=np.int64))
    own_block = (cols >= noisy.start) & (cols < noisy.end)

    keep = own_block | (is_text & in_window) | (is_image & is_ref & ~own_block)
    rows = slice(noisy.start, noisy.end)
    mask[rows] &= keep[None, :]
    return mask


def oracle_mask(
    segments: list[Segment],
    mode: str = "base",
    *,
    window_w: int | None = None,
    dense_span: Segment | None = None,
    reference_ordinals: tuple[int, ...] | list[int] = (),
) -> np.ndarray:
    """Evaluate the written rule predicate independently per (i, j). Tests only."""
    total = validate_segments(segments)
    pos_seg: list[Segment] = []
    for seg in segments:
        pos_seg.extend([seg] * seg.length)

    def base_allow(i: int, j: int) -> bool:
        si, sj = pos_seg[i], pos_seg[j]
        if si is sj:
            if si.kind in TEXT_KINDS:
                return i >= j
            return True
        if not sj.start < si.start:
            return False  # later (or same-start) segment
        if si.owner is Owner.PLANNER and sj.kind in _LATENT_KINDS:
            return False
        return True

    if mode == "base":
        allow = base_allow
    elif mode == "dpcw":
        if dense_span is None or window_w is None:
            raise ValueError("dpcw mode needs window_w and dense_span")
        if not any(
            s.kind is SegKind.DENSE_PROMPT
            and s.start == dense_span.start
            and s.length == dense_span.length
            for s in segments
        ):
            raise SpanError("dense_span is not a DENSE_PROMPT segment of the layout")
        noisy = _find_noisy_block(segments, dense_span)
        refs = set(reference_ordinals)

        def allow(i: int, j: int) -> bool:
            if not base_allow(i, j):
                return False
            if not noisy.start <= i < noisy.end:
                return True
            sj = pos_seg[j]
            if sj is noisy:
                return True
            if sj.kind in TEXT_KINDS:
                return dense_span.start - window_w <= j <= dense_span.last
            return sj.ordinal in refs
    else:
        raise ValueError(f"unknown mode {mode!r}")

    out = np.zeros((total, total), dtype=bool)
    for i in range(total):
        for j in range(total):
            out[i, j] = allow(i, j)
    return out


def write_pgm(mask: np.ndarray, path) -> None:
    """Dump a mask as a binary PGM (allowed = 255) for visual inspection."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())

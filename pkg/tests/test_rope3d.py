"""Unit tests for 3D rotary position embeddings."""

import numpy as np
import pytest
import torch

from helpers import random_layout
from planviz.core import LayoutError, SegKind, Segment
from planviz.rope3d import (
    WidthError, apply_rope, assign_positions, rope_angles, rotate_pairs,
)


def standard_rope_1d(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Reference textbook RoPE over one axis (interleaved-pair rotation)."""
    width = x.shape[-1]
    half = width // 2
    inv_freq = 10000.0 ** (-torch.arange(half, dtype=x.dtype) * 2.0 / width)
    ang = t.to(x.dtype).unsqueeze(-1) * inv_freq
    cos, sin = torch.cos(ang), torch.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack((even * cos - odd * sin,
                        even * sin + odd * cos), dim=-1).flatten(-2)


class TestAssignPositions:
    def test_text_counter_and_zero_grid(self):
        segs = [Segment(SegKind.TEXT, 0, 5)]
        pos = assign_positions(segs)
        np.testing.assert_array_equal(pos[:, 0], np.arange(5))
        assert (pos[:, 1:] == 0).all()

    def test_image_inherits_boi_t_and_carries_grid(self):
        segs = [Segment(SegKind.TEXT, 0, 3),
                Segment(SegKind.VIT_IMG, 3, 4, ordinal=0)]
        pos = assign_positions(segs)
        # BOI is the last text token at t=2; the image shares t=2
        assert (pos[3:, 0] == 2).all()
        np.testing.assert_array_equal(pos[3:, 1], [0, 0, 1, 1])
        np.testing.assert_array_equal(pos[3:, 2], [0, 1, 0, 1])

    def test_counter_frozen_across_image_blocks(self):
        segs = [Segment(SegKind.TEXT, 0, 3),
                Segment(SegKind.VIT_IMG, 3, 4, ordinal=0),
                Segment(SegKind.VAE_CLEAN, 7, 4, ordinal=0),
                Segment(SegKind.TEXT, 11, 2)]
        pos = assign_positions(segs)
        np.testing.assert_array_equal(pos[11:, 0], [3, 4])
        assert (pos[3:11, 0] == 2).all()

    def test_text_positions_identical_with_and_without_blocks(self):
        with_blocks = [Segment(SegKind.TEXT, 0, 4),
                       Segment(SegKind.VIT_IMG, 4, 4, ordinal=0),
                       Segment(SegKind.VAE_CLEAN, 8, 4, ordinal=0),
                       Segment(SegKind.TEXT, 12, 3)]
        without = [Segment(SegKind.TEXT, 0, 4), Segment(SegKind.TEXT, 4, 3)]
        pa = assign_positions(with_blocks)
        pb = assign_positions(without)
        np.testing.assert_array_equal(pa[:4], pb[:4])
        np.testing.assert_array_equal(pa[12:], pb[4:])

    def test_leading_image_clamps_to_zero(self):
        segs = [Segment(SegKind.VIT_IMG, 0, 4, ordinal=0)]
        pos = assign_positions(segs)
        assert (pos[:, 0] == 0).all()

    def test_non_square_image_rejected(self):
        with pytest.raises(LayoutError):
            assign_positions([Segment(SegKind.VIT_IMG, 0, 6, ordinal=0)])

    def test_paired_blocks_share_grid(self):
        segs = [Segment(SegKind.TEXT, 0, 1),
                Segment(SegKind.VIT_IMG, 1, 9, ordinal=0),
                Segment(SegKind.VAE_CLEAN, 10, 9, ordinal=0)]
        pos = assign_positions(segs)
        np.testing.assert_array_equal(pos[1:10, 1:], pos[10:19, 1:])


class TestRopeAngles:
    def test_width_must_divide_by_six(self):
        pos = torch.zeros(4, 3, dtype=torch.int64)
        with pytest.raises(WidthError):
            rope_angles(pos, 16)

    def test_tables_shape(self):
        pos = torch.zeros(10, 3, dtype=torch.int64)
        cos, sin = rope_angles(pos, 48)
        assert cos.shape == sin.shape == (10, 24)

    def test_origin_gives_identity(self):
        x = torch.randn(6, 48)
        pos = torch.zeros(6, 3, dtype=torch.int64)
        torch.testing.assert_close(apply_rope(x, pos), x)

    def test_norm_preserved(self):
        torch.manual_seed(0)
        x = torch.randn(12, 48)
        pos = torch.randint(0, 50, (12, 3))
        y = apply_rope(x, pos)
        torch.testing.assert_close(y.norm(dim=-1), x.norm(dim=-1),
                                   rtol=1e-5, atol=1e-5)

    def test_axes_occupy_contiguous_thirds(self):
        x = torch.randn(1, 48)
        base = apply_rope(x, torch.zeros(1, 3, dtype=torch.int64))
        only_t = apply_rope(x, torch.tensor([[7, 0, 0]]))
        only_h = apply_rope(x, torch.tensor([[0, 7, 0]]))
        only_w = apply_rope(x, torch.tensor([[0, 0, 7]]))
        # each axis perturbs exactly its own third of the channels
        assert not torch.allclose(only_t[..., :16], base[..., :16])
        torch.testing.assert_close(only_t[..., 16:], base[..., 16:])
        torch.testing.assert_close(only_h[..., :16], base[..., :16])
        assert not torch.allclose(only_h[..., 16:32], base[..., 16:32])
        torch.testing.assert_close(only_h[..., 32:], base[..., 32:])
        torch.testing.assert_close(only_w[..., :32], base[..., :32])
        assert not torch.allclose(only_w[..., 32:], base[..., 32:])


class TestRopeInvariants:
    def test_text_only_matches_standard_rope(self):
        """On pure text, the t-third equals textbook 1D RoPE of that width."""
        torch.manual_seed(1)
        L, width = 20, 48
        third = width // 3
        x = torch.randn(L, width)
        pos = assign_positions([Segment(SegKind.TEXT, 0, L)])
        got = apply_rope(x, torch.from_numpy(pos))
        t = torch.arange(L)
        want_t = standard_rope_1d(x[:, :third], t)
        torch.testing.assert_close(got[:, :third], want_t,
                                   rtol=1e-5, atol=1e-5)
        # h = w = 0 for text: the remaining thirds pass through unrotated
        torch.testing.assert_close(got[:, third:], x[:, third:])

    def test_attention_scores_shift_invariant(self):
        """q.k after rotation depends only on relative offsets per axis."""
        torch.manual_seed(2)
        width = 48
        q = torch.randn(8, width, dtype=torch.float64)
        k = torch.randn(8, width, dtype=torch.float64)
        pos = torch.randint(0, 40, (8, 3))
        for delta in ((13, 0, 0), (0, 9, 0), (0, 0, 5), (7, 3, 2)):
            shifted = pos + torch.tensor(delta)
            a = apply_rope(q, pos) @ apply_rope(k, pos).T
            b = apply_rope(q, shifted) @ apply_rope(k, shifted).T
            torch.testing.assert_close(a, b, rtol=1e-9, atol=1e-6)

    def test_scores_depend_on_relative_offset(self):
        torch.manual_seed(3)
        q = torch.randn(1, 48)
        k = torch.randn(1, 48)
        p0 = torch.tensor([[0, 0, 0]])
        p5 = torch.tensor([[5, 0, 0]])
        same = (apply_rope(q, p0) @ apply_rope(k, p0).T).item()
        far = (apply_rope(q, p0) @ apply_rope(k, p5).T).item()
        assert abs(same - far) > 1e-6

    def test_materialized_blocks_leave_text_rotation_unchanged(self):
        """The frozen counter makes text rotations independent of image blocks."""
        torch.manual_seed(4)
        x = torch.randn(7, 48)
        with_blocks = [Segment(SegKind.TEXT, 0, 4),
                       Segment(SegKind.VIT_IMG, 4, 4, ordinal=0),
                       Segment(SegKind.TEXT, 8, 3)]
        without = [Segment(SegKind.TEXT, 0, 4), Segment(SegKind.TEXT, 4, 3)]
        pa = torch.from_numpy(assign_positions(with_blocks))
        pb = torch.from_numpy(assign_positions(without))
        ya = apply_rope(x, torch.cat([pa[:4], pa[8:]]))
        yb = apply_rope(x, pb)
        torch.testing.assert_close(ya, yb)

    def test_random_layout_positions_always_valid(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            segments, _, _ = random_layout(rng)
            total = segments[-1].end
            pos = assign_positions(segments)
            assert pos.shape == (total, 3)
            assert (pos >= 0).all()


class TestRotatePairs:
    def test_explicit_two_channel_rotation(self):
        x = torch.tensor([[1.0, 0.0]])
        cos = torch.tensor([[0.0]])
        sin = torch.tensor([[1.0]])
        y = rotate_pairs(x, cos, sin)
        torch.testing.assert_close(y, torch.tensor([[0.0, 1.0]]))

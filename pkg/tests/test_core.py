"""Unit tests for the token grammar, segment tables, and sequence fixtures."""

import pytest
from hypothesis import given, strategies as st

from planviz.core import (
    BOI, BOS, EOS, IMAGINE_CLOSE, IMAGINE_OPEN, PAD, SPECIAL_IDS,
    InterleavedSequence, LayoutError, Owner, SegKind, Segment, UnknownId,
    UnknownToken, VOCAB, count_images, detokenize, parse_interleaved,
    read_sequence_fixture, tokenize, validate_segments,
    write_sequence_fixture,
)


class TestVocab:
    def test_specials_occupy_low_ids(self):
        assert PAD == 0
        assert {BOS, EOS, BOI, IMAGINE_OPEN, IMAGINE_CLOSE} == set(range(1, 6))
        assert SPECIAL_IDS == frozenset(range(6))

    def test_tokenize_round_trip(self):
        text = "<BOS> draw a small red circle at 0 0 on white background"
        assert detokenize(tokenize(text)) == text

    def test_unknown_word_raises(self):
        with pytest.raises(UnknownToken):
            tokenize("draw a purple circle")

    def test_unknown_id_raises(self):
        with pytest.raises(UnknownId):
            detokenize([len(VOCAB)])

    def test_vocab_is_small_and_closed(self):
        assert len(VOCAB) <= 512

    @given(st.lists(st.integers(0, len(VOCAB) - 1), max_size=32))
    def test_detokenize_total_over_vocab_ids(self, ids):
        text = detokenize(ids)
        assert tokenize(text) == ids


class TestParseInterleaved:
    def parse(self, text):
        return parse_interleaved(tokenize(text))

    def test_minimal_valid_response(self):
        p = self.parse("<imagine> a small red circle at 0 0 on white "
                       "background </imagine> <BOI> <EOS>")
        assert p.valid
        assert p.dense_spans == [(1, 11)]
        assert p.boi_positions == [12]
        assert p.text_spans == []

    def test_text_around_image(self):
        p = self.parse("the first image <imagine> a small red circle at 0 0 "
                       "on white background </imagine> <BOI> the second image "
                       "<EOS>")
        assert p.valid
        assert len(p.dense_spans) == 1
        assert len(p.text_spans) == 2
        a, b = p.text_spans[0]
        assert detokenize(tokenize("the first image")) == \
            detokenize(self._ids("the first image"))
        assert (a, b) == (0, 3)

    @staticmethod
    def _ids(text):
        return tokenize(text)

    def test_boi_without_close_is_invalid(self):
        p = self.parse("draw a circle <BOI>")
        assert not p.valid
        assert "not preceded" in p.reason

    def test_boi_at_position_zero_is_invalid(self):
        p = self.parse("<BOI>")
        assert not p.valid

    def test_unmatched_open_is_invalid(self):
        p = self.parse("<imagine> a red circle")
        assert not p.valid
        assert "unmatched" in p.reason

    def test_unmatched_close_is_invalid(self):
        p = self.parse("a red circle </imagine>")
        assert not p.valid

    def test_nested_open_is_invalid(self):
        p = self.parse("<imagine> a <imagine> red </imagine> </imagine>")
        assert not p.valid
        assert "nested" in p.reason

    def test_boi_inside_imagine_is_invalid(self):
        p = self.parse("<imagine> a red circle <BOI> </imagine>")
        assert not p.valid

    def test_empty_dense_span_is_recorded(self):
        p = self.parse("<imagine> </imagine> <BOI>")
        assert p.valid
        assert p.dense_spans == [(1, 1)]

    def test_specials_break_text_spans(self):
        p = self.parse("<BOS> a red circle <EOS>")
        assert p.valid
        assert p.text_spans == [(1, 4)]

    def test_multiple_images(self):
        text = ("<imagine> a red circle at 0 0 </imagine> <BOI> "
                "<imagine> a blue square at 1 1 </imagine> <BOI> <EOS>")
        p = self.parse(text)
        assert p.valid
        assert len(p.dense_spans) == 2
        assert len(p.boi_positions) == 2

    def test_never_raises_on_garbage(self):
        for ids in ([BOI, BOI, BOI], [IMAGINE_CLOSE] * 4,
                    [IMAGINE_OPEN] * 4, [], [PAD, PAD]):
            p = parse_interleaved(ids)
            assert isinstance(p.valid, bool)

    @given(st.lists(st.integers(0, len(VOCAB) - 1), max_size=48))
    def test_total_over_arbitrary_ids(self, ids):
        p = parse_interleaved(ids)
        if not p.valid:
            assert p.reason
        for a, b in p.dense_spans + p.text_spans:
            assert 0 <= a <= b <= len(ids)
        # a valid stream has equally many dense spans before each BOI
        if p.valid:
            for pos in p.boi_positions:
                assert pos > 0 and ids[pos - 1] == IMAGINE_CLOSE


class TestCountImages:
    def test_counts_boi_tokens(self):
        assert count_images(tokenize("<BOI> draw <BOI>")) == 2
        assert count_images(tokenize("draw a circle")) == 0
        assert count_images([]) == 0

    def test_scoped_by_slicing(self):
        ids = tokenize("<BOI> draw </imagine> <BOI>")
        assert count_images(ids[1:]) == 1


class TestSegments:
    def test_owner_mapping(self):
        assert Segment(SegKind.TEXT, 0, 4).owner is Owner.PLANNER
        assert Segment(SegKind.DENSE_PROMPT, 0, 4).owner is Owner.PLANNER
        assert Segment(SegKind.VIT_IMG, 0, 4, ordinal=0).owner is Owner.PLANNER
        assert Segment(SegKind.VAE_CLEAN, 0, 4, ordinal=0).owner \
            is Owner.VISUALIZER
        assert Segment(SegKind.VAE_NOISY, 0, 4, ordinal=0).owner \
            is Owner.VISUALIZER

    def test_image_segment_requires_ordinal(self):
        with pytest.raises(LayoutError):
            Segment(SegKind.VIT_IMG, 0, 4)

    def test_end_and_last(self):
        seg = Segment(SegKind.TEXT, 3, 5)
        assert seg.end == 8
        assert seg.last == 7

    def test_validate_contiguous(self):
        segs = [Segment(SegKind.TEXT, 0, 3),
                Segment(SegKind.VIT_IMG, 3, 4, ordinal=0),
                Segment(SegKind.VAE_CLEAN, 7, 4, ordinal=0)]
        assert validate_segments(segs) == 11

    def test_validate_rejects_gap(self):
        segs = [Segment(SegKind.TEXT, 0, 3), Segment(SegKind.TEXT, 4, 2)]
        with pytest.raises(LayoutError):
            validate_segments(segs)

    def test_validate_rejects_ordinal_regression(self):
        segs = [Segment(SegKind.VIT_IMG, 0, 2, ordinal=1),
                Segment(SegKind.VIT_IMG, 2, 2, ordinal=0)]
        with pytest.raises(LayoutError):
            validate_segments(segs)


class TestInterleavedSequence:
    def _sequence(self):
        ids = tokenize("<BOS> draw a red circle <BOI>") + [-1] * 4 + \
            tokenize("<imagine> a red circle </imagine> <BOI>") + [-1] * 4
        segs = [
            Segment(SegKind.TEXT, 0, 6),
            Segment(SegKind.VIT_IMG, 6, 2, ordinal=0),
            Segment(SegKind.VAE_CLEAN, 8, 2, ordinal=0),
            Segment(SegKind.TEXT, 10, 1),
            Segment(SegKind.DENSE_PROMPT, 11, 3),
            Segment(SegKind.TEXT, 14, 2),
            Segment(SegKind.VAE_NOISY, 16, 4, ordinal=1),
        ]
        return InterleavedSequence(ids=ids, segments=segs, prompt_len=10)

    def test_validate_accepts_well_formed(self):
        self._sequence().validate()

    def test_text_views(self):
        seq = self._sequence()
        text_pos = seq.text_positions()
        assert all(seq.ids[p] >= 0 for p in text_pos)
        resp = seq.response_text_ids()
        assert resp == seq.ids[10:16]

    def test_image_block_needs_boi(self):
        ids = tokenize("draw a circle") + [-1] * 2
        segs = [Segment(SegKind.TEXT, 0, 3),
                Segment(SegKind.VIT_IMG, 3, 2, ordinal=0)]
        seq = InterleavedSequence(ids=ids, segments=segs, prompt_len=3)
        with pytest.raises(LayoutError):
            seq.validate()


class TestSequenceFixture:
    def test_round_trip(self, tmp_path):
        records = [("prompt", "<BOS> draw a red circle"),
                   ("response", "<imagine> a red circle </imagine> <BOI> <EOS>")]
        path = tmp_path / "sequences.tsv"
        write_sequence_fixture(path, records)
        assert read_sequence_fixture(path) == records

    def test_file_is_line_oriented(self, tmp_path):
        path = tmp_path / "sequences.tsv"
        write_sequence_fixture(path, [("prompt", "draw"), ("response", "a")])
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[0].split("\t")[0] == "prompt"

"""Interleaved-sequence data model.

Closed word-level vocabulary with the special tokens that structure interleaved
output (<BOI>, <imagine>, </imagine>), segment/layout types shared by the mask
builder and the model, and the grammar parser for planner output. Everything in
here is pure and deterministic; there is no tokenizer state to drift.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


# =============================================================================
# Errors
# =============================================================================

class UnknownToken(ValueError):
    """A word outside the closed vocabulary was tokenized."""


class UnknownId(ValueError):
    """An id outside the vocabulary was detokenized."""


class LayoutError(ValueError):
    """Segments do not form a valid contiguous layout."""


# =============================================================================
# Segments
# =============================================================================

class SegKind(enum.IntEnum):
    TEXT = 0
    DENSE_PROMPT = 1
    VIT_IMG = 2
    VAE_CLEAN = 3
    VAE_NOISY = 4


class Owner(enum.IntEnum):
    PLANNER = 0
    VISUALIZER = 1


IMAGE_KINDS = (SegKind.VIT_IMG, SegKind.VAE_CLEAN, SegKind.VAE_NOISY)
TEXT_KINDS = (SegKind.TEXT, SegKind.DENSE_PROMPT)

# Fixed ownership: text belongs to the planner, latents to the visualizer. ViT
# features are the planner's view of images, so they route through the planner.
KIND_OWNER = {
    SegKind.TEXT: Owner.PLANNER,
    SegKind.DENSE_PROMPT: Owner.PLANNER,
    SegKind.VIT_IMG: Owner.PLANNER,
    SegKind.VAE_CLEAN: Owner.VISUALIZER,
    SegKind.VAE_NOISY: Owner.VISUALIZER,
}


@dataclass(frozen=True)
class Segment:
    """A contiguous run of same-kind positions in a flat sequence."""

    kind: SegKind
    start: int
    length: int
    ordinal: int | None = None  # image index for image kinds, None for text

    def __post_init__(self):
        if self.length < 1:
            raise LayoutError(f"segment length must be >= 1, got {self.length}")
        if self.kind in IMAGE_KINDS and self.ordinal is None:
            raise LayoutError(f"{self.kind.name} segment needs an image ordinal")

    @property
    def owner(self) -> Owner:
        return KIND_OWNER[self.kind]

    @property
    def end(self) -> int:
        """Index one past the last position."""
        return self.start + self.length

    @property
    def last(self) -> int:
        """Index of the last position."""
        return self.start + self.length - 1


def validate_segments(segments: list[Segment]) -> int:
    """Check contiguous cover from 0 and monotone image ordinals; return total length."""
    pos = 0
    prev_ordinal = -1
    for seg in segments:
        if seg.start != pos:
            raise LayoutError(
                f"segment {seg.kind.name} starts at {seg.start}, expected {pos}"
            )
        pos = seg.end
        if seg.kind in IMAGE_KINDS:
            if seg.ordinal < prev_ordinal:
                raise LayoutError(
                    f"image ordinal {seg.ordinal} after {prev_ordinal}"
                )
            prev_ordinal = seg.ordinal
    return pos


# =============================================================================
# Vocabulary
# =============================================================================

SPECIAL_TOKENS = ("<PAD>", "<BOS>", "<EOS>", "<BOI>", "<imagine>", "</imagine>")

# The full closed toy language: scene attributes plus the template glue used by
# the data synthesizer. Order is frozen; ids are indices into this list.
ORDINARY_WORDS = (
    # shapes / colors / sizes / backgrounds / grid digits
    "circle", "square", "triangle",
    "red", "green", "blue", "yellow",
    "small", "large",
    "white", "black",
    "0", "1", "2",
    # template glue
    "a", "the", "at", "on", "in", "to", "from", "and", "is",
    "image", "background",
    "draw", "show", "change", "combine", "what", "where",
    "color", "shape", "size", "position", "colors", "positions",
    "first", "second", "third", "fourth",
    "one", "two", "three", "four",
)


@dataclass(frozen=True)
class Vocab:
    """Closed vocabulary with dense ids; specials first, then ordinary words."""

    tokens: tuple[str, ...]
    stoi: dict[str, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "stoi", {w: i for i, w in enumerate(self.tokens)})
        assert len(self.stoi) == len(self.tokens), "duplicate token in vocab"

    @classmethod
    def default(cls) -> "Vocab":
        return cls(tokens=SPECIAL_TOKENS + ORDINARY_WORDS)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.stoi[token]
        except KeyError:
            raise UnknownToken(f"not in the closed vocabulary: {token!r}") from None

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise UnknownId(f"id out of range: {idx}")
        return self.tokens[idx]


VOCAB = Vocab.default()

PAD = VOCAB.id("<PAD>")
BOS = VOCAB.id("<BOS>")
EOS = VOCAB.id("<EOS>")
BOI = VOCAB.id("<BOI>")
IMAGINE_OPEN = VOCAB.id("<imagine>")
IMAGINE_CLOSE = VOCAB.id("</imagine>")

SPECIAL_IDS = frozenset(range(len(SPECIAL_TOKENS)))


def tokenize(text: str) -> list[int]:
    """Map a whitespace-delimited string to ids. Special literals are accepted."""
    return [VOCAB.id(word) for word in text.split()]


def detokenize(ids: list[int]) -> str:
    """Inverse of tokenize; specials render as their literal forms."""
    return " ".join(VOCAB.token(i) for i in ids)


# =============================================================================
# Grammar parser
# =============================================================================

@dataclass
class ParseResult:
    """Span table for a planner text stream.

    text_spans / dense_spans are (start, end) pairs with end exclusive, indices
    into the id list given to parse_interleaved. Text spans are maximal runs of
    ordinary words outside dense regions; dense spans are the ids strictly
    between a matched <imagine> ... </imagine> pair.
    """

    text_spans: list[tuple[int, int]]
    dense_spans: list[tuple[int, int]]
    boi_positions: list[int]
    valid: bool
    reason: str | None = None


def parse_interleaved(ids: list[int]) -> ParseResult:
    """Parse a flat planner id stream against the imagine/BOI grammar.

    Total over arbitrary id lists: malformed input is reported via .valid and
    .reason, never raised — generation-time output may be arbitrary.
    """
    text_spans: list[tuple[int, int]] = []
    dense_spans: list[tuple[int, int]] = []
    boi_positions: list[int] = []
    valid = True
    reason = None

    def fail(why: str):
        nonlocal valid, reason
        if valid:
            valid, reason = False, why

    open_at: int | None = None  # position of the unmatched <imagine>, if any
    text_start: int | None = None

    def close_text(end: int):
        nonlocal text_start
        if text_start is not None:
            text_spans.append((text_start, end))
            text_start = None

    for pos, tok in enumerate(ids):
        if tok == IMAGINE_OPEN:
            close_text(pos)
            if open_at is not None:
                fail(f"nested <imagine> at position {pos}")
            open_at = pos
        elif tok == IMAGINE_CLOSE:
            close_text(pos)
            if open_at is None:
                fail(f"unmatched </imagine> at position {pos}")
            else:
                dense_spans.append((open_at + 1, pos))
                open_at = None
        elif tok == BOI:
            close_text(pos)
            boi_positions.append(pos)
            if open_at is not None:
                fail(f"<BOI> inside <imagine> at position {pos}")
            if pos == 0 or ids[pos - 1] != IMAGINE_CLOSE:
                fail(f"<BOI> at position {pos} not preceded by </imagine>")
        elif tok in SPECIAL_IDS:
            # BOS / EOS / PAD break text spans but carry no grammar weight.
            close_text(pos)
        else:
            if text_start is None and open_at is None:
                text_start = pos
    close_text(len(ids))
    if open_at is not None:
        fail(f"unmatched <imagine> at position {open_at}")
    return ParseResult(text_spans, dense_spans, boi_positions, valid, reason)


def count_images(ids: list[int]) -> int:
    """Number of <BOI> tokens in the given id stream.

    Callers scope the count by slicing (e.g. pass only the response region to
    exclude prompt-side images).
    """
    return sum(1 for tok in ids if tok == BOI)


# =============================================================================
# Interleaved sequences
# =============================================================================

@dataclass
class InterleavedSequence:
    """A flat multimodal sequence: token ids plus the segment layout.

    Positions covered by image segments hold id -1; their content (latent or
    ViT arrays) lives with whoever assembles the model batch. prompt_len marks
    the prompt/response boundary in flat positions.
    """

    ids: list[int]
    segments: list[Segment]
    prompt_len: int

    def validate(self) -> None:
        total = validate_segments(self.segments)
        if total != len(self.ids):
            raise LayoutError(
                f"segments cover {total} positions, ids have {len(self.ids)}"
            )
        if not 0 <= self.prompt_len <= len(self.ids):
            raise LayoutError(f"prompt_len {self.prompt_len} out of range")
        # Every image block group is announced by a BOI at the preceding text
        # position (a VIT/VAE_CLEAN pair of the same ordinal shares one BOI).
        prev: Segment | None = None
        for seg in self.segments:
            if seg.kind in IMAGE_KINDS:
                same_image = (
                    prev is not None
                    and prev.kind in IMAGE_KINDS
                    and prev.ordinal == seg.ordinal
                )
                if not same_image:
                    if seg.start == 0 or self.ids[seg.start - 1] != BOI:
                        raise LayoutError(
                            f"image block at {seg.start} not preceded by <BOI>"
                        )
            prev = seg

    def text_positions(self) -> list[int]:
        """Flat positions holding planner text (TEXT or DENSE_PROMPT)."""
        out = []
        for seg in self.segments:
            if seg.kind in TEXT_KINDS:
                out.extend(range(seg.start, seg.end))
        return out

    def text_ids(self) -> list[int]:
        """The planner text stream, image blocks skipped."""
        return [self.ids[p] for p in self.text_positions()]

    def response_text_ids(self) -> list[int]:
        """Planner text stream restricted to the response region."""
        return [self.ids[p] for p in self.text_positions() if p >= self.prompt_len]


# =============================================================================
# Sequence fixture files
# =============================================================================

def write_sequence_fixture(path, records: list[tuple[str, str]]) -> None:
    """Write (role, tokens) records, one per line: role TAB space-joined literals."""
    with open(path, "w", encoding="utf-8") as fh:
        for role, tokens in records:
            if role not in ("prompt", "response"):
                raise ValueError(f"role must be prompt|response, got {role!r}")
            fh.write(f"{role}\t{tokens}\n")


def read_sequence_fixture(path) -> list[tuple[str, str]]:
    """Read records written by write_sequence_fixture."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            role, sep, tokens = line.partition("\t")
            if not sep or role not in ("prompt", "response"):
                raise ValueError(f"{path}:{lineno}: bad fixture line {line!r}")
            records.append((role, tokens))
    return records

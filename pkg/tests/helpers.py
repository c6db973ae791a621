"""Shared test utilities: random segment layouts and tiny model fixtures."""

import numpy as np

from planviz.core import SegKind, Segment

# One (criterion number, line) entry per acceptance criterion, printed as a
# terminal-summary section by conftest so the verdicts survive pytest capture.
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def report_criterion(number: int, name: str, ok: bool, detail: str = "") -> None:
    tail = f" [{detail}]" if detail else ""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} — {name}{tail}"
    ACCEPTANCE_LINES.append((number, line))
    assert ok, line


def random_layout(rng: np.random.Generator, max_len: int = 64,
                  require_noisy: bool = False):
    """A random valid segment layout within max_len positions.

    Returns (segments, dense_seg, ref_ordinals); dense_seg is the dense span
    directly preceding the noisy block (None when no noisy block was placed).
    Image blocks arrive as ViT (+ optional clean twin) pairs with increasing
    ordinals, mirroring how prompts and transcripts are materialized.
    """
    segments = []
    pos = 0
    ordinal = 0

    def add(kind, length, ord_=None):
        nonlocal pos
        segments.append(Segment(kind, pos, length, ordinal=ord_))
        pos += length

    squares = (1, 4, 9)  # image blocks are square patch grids
    add(SegKind.TEXT, int(rng.integers(1, 7)))
    # reserve room for an optional dense+boi+noisy tail
    noisy_len = int(squares[rng.integers(len(squares))])
    tail = 1 + 1 + noisy_len + 4
    budget = max_len - pos - tail
    while budget > 8 and rng.random() < 0.7:
        roll = rng.random()
        if roll < 0.45:
            vit = int(squares[rng.integers(len(squares))])
            add(SegKind.VIT_IMG, vit, ordinal)
            budget -= vit
            if rng.random() < 0.7:
                clean = int(squares[rng.integers(len(squares))])
                add(SegKind.VAE_CLEAN, clean, ordinal)
                budget -= clean
            ordinal += 1
        elif roll < 0.8:
            t = int(rng.integers(1, 6))
            add(SegKind.TEXT, t)
            budget -= t
        else:
            d = int(rng.integers(1, 5))
            add(SegKind.DENSE_PROMPT, d)
            budget -= d
            t = int(rng.integers(1, 3))
            add(SegKind.TEXT, t)
            budget -= t

    dense_seg = None
    if require_noisy or rng.random() < 0.6:
        add(SegKind.DENSE_PROMPT, int(rng.integers(1, 5)))
        dense_seg = segments[-1]
        add(SegKind.TEXT, 1)  # the <BOI> marker position
        add(SegKind.VAE_NOISY, noisy_len, ordinal)

    refs = tuple(int(o) for o in range(ordinal)
                 if rng.random() < 0.6)
    return segments, dense_seg, refs

"""Sequential interleaved generation.

The loop alternates the two experts over one growing history: the planner
decodes text greedily until it emits <BOI>, the dense span immediately before
that trigger is located and re-segmented, the visualizer denoises one latent
block under the configured mask, and the decoded image is re-encoded (ViT +
clean-latent blocks) back into the history before text decoding resumes.

There is no KV cache; every step re-runs the joint forward over the full
history. Decoding masks are always the base multimodal-causal mask — the
DPCW restriction only ever applies to the noisy rows during image sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import (
    BOI, EOS, IMAGINE_CLOSE, IMAGINE_OPEN, VOCAB, InterleavedSequence,
    SegKind, Segment, detokenize, parse_interleaved,
)
from .masks import build_causal_mm_mask, build_dpcw_mask
from .model import ModelState, Row, forward_joint, pack_rows, sample_image
from .rope3d import assign_positions
from .toyworld import (
    LATENT_PATCH_DIM, LATENT_TOKENS, VIT_TOKENS, latent_to_patches,
    patches_to_latent, save_raw, vae_decode, vae_encode, vit_encode,
)


class PromptParseError(ValueError):
    """Prompt stream unusable: bad ids, imagine markers, or ref-count mismatch."""


@dataclass(frozen=True)
class GenerationConfig:
    max_images: int = 4
    max_text_tokens: int = 96     # covers the longest legal response + slack
    sampler_steps: int = 10
    temperature: float = 0.0
    mask_mode: str = "dpcw"       # denoising mask; text decoding is always base
    window_w: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.max_images < 0:
            raise ValueError("max_images must be >= 0")
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be >= 1")
        if self.mask_mode not in ("base", "dpcw"):
            raise ValueError(f"mask_mode must be base|dpcw, got {self.mask_mode!r}")


@dataclass
class GenerationResult:
    sequence: InterleavedSequence
    images: list[np.ndarray]          # decoded, clipped to [-1, 1], in order
    dense_prompts: list[str]
    grammar_valid: bool
    stop_reason: str                  # EOS | MAX_IMAGES | MAX_TOKENS | MALFORMED
    response_text: str = ""
    prompt_text: str = ""


# =============================================================================
# Growing history
# =============================================================================

class History:
    """Flat multimodal sequence under construction.

    Token ids, segment layout, and per-position ViT/latent content grow
    together; every forward pass rebuilds a single-row batch from the
    current state (history is monotone — segments are only appended, never
    rewritten, except for splitting a trailing text run around a dense span).
    """

    def __init__(self, d_model: int):
        self.d_model = d_model
        self.ids: list[int] = []
        self.kinds: list[int] = []
        self.segments: list[Segment] = []
        self._vit: list[np.ndarray] = []      # one (d_model,) row per position
        self._lat: list[np.ndarray] = []      # one (patch_dim,) row per position
        self.prompt_len = 0
        self.resp_text_flat: list[int] = []   # flat positions of response text

    def __len__(self) -> int:
        return len(self.ids)

    # --- appends ---

    def append_text(self, tid: int) -> None:
        pos = len(self.ids)
        self.ids.append(int(tid))
        self.kinds.append(int(SegKind.TEXT))
        if self.segments and self.segments[-1].kind is SegKind.TEXT \
                and self.segments[-1].end == pos:
            last = self.segments[-1]
            self.segments[-1] = Segment(SegKind.TEXT, last.start, last.length + 1)
        else:
            self.segments.append(Segment(SegKind.TEXT, pos, 1))
        self._vit.append(np.zeros(self.d_model, dtype=np.float32))
        self._lat.append(np.zeros(LATENT_PATCH_DIM, dtype=np.float32))
        if pos >= self.prompt_len:
            self.resp_text_flat.append(pos)

    def pop_text(self) -> int:
        """Remove the most recent position; it must be a text token."""
        if not self.ids or self.kinds[-1] != int(SegKind.TEXT):
            raise ValueError("history does not end in a text token")
        tid = self.ids.pop()
        self.kinds.pop()
        self._vit.pop()
        self._lat.pop()
        last = self.segments[-1]
        if last.length == 1:
            self.segments.pop()
        else:
            self.segments[-1] = Segment(last.kind, last.start, last.length - 1)
        if self.resp_text_flat and self.resp_text_flat[-1] == len(self.ids):
            self.resp_text_flat.pop()
        return tid

    def append_image(self, vit_tokens: np.ndarray, clean_patches: np.ndarray,
                     ordinal: int) -> None:
        pos = len(self.ids)
        self.segments.append(Segment(SegKind.VIT_IMG, pos, VIT_TOKENS, ordinal))
        self.segments.append(
            Segment(SegKind.VAE_CLEAN, pos + VIT_TOKENS, LATENT_TOKENS, ordinal))
        for row in vit_tokens:
            self.ids.append(-1)
            self.kinds.append(int(SegKind.VIT_IMG))
            self._vit.append(np.asarray(row, dtype=np.float32))
            self._lat.append(np.zeros(LATENT_PATCH_DIM, dtype=np.float32))
        for row in clean_patches:
            self.ids.append(-1)
            self.kinds.append(int(SegKind.VAE_CLEAN))
            self._vit.append(np.zeros(self.d_model, dtype=np.float32))
            self._lat.append(np.asarray(row, dtype=np.float32))

    def mark_dense(self, start: int, end: int) -> Segment:
        """Split the trailing text run so [start, end) becomes a DENSE segment."""
        idx = next(
            i for i, s in enumerate(self.segments)
            if s.kind is SegKind.TEXT and s.start <= start and end <= s.end
        )
        run = self.segments[idx]
        parts = []
        if start > run.start:
            parts.append(Segment(SegKind.TEXT, run.start, start - run.start))
        dense = Segment(SegKind.DENSE_PROMPT, start, end - start)
        parts.append(dense)
        if run.end > end:
            parts.append(Segment(SegKind.TEXT, end, run.end - end))
        self.segments[idx:idx + 1] = parts
        for p in range(start, end):
            self.kinds[p] = int(SegKind.DENSE_PROMPT)
        return dense

    # --- views ---

    def last_text_pos(self) -> int:
        for pos in range(len(self.ids) - 1, -1, -1):
            if self.kinds[pos] in (int(SegKind.TEXT), int(SegKind.DENSE_PROMPT)):
                return pos
        raise ValueError("history holds no text positions")

    def response_text_ids(self) -> list[int]:
        return [self.ids[p] for p in self.resp_text_flat]

    def row(self, *, extra_noisy: int | None = None, mask_mode: str = "base",
            window_w: int = 0, dense_seg: Segment | None = None,
            refs: tuple[int, ...] = ()) -> Row:
        """Materialize the history (optionally + one noisy block) as a Row."""
        segments = list(self.segments)
        ids = list(self.ids)
        kinds = list(self.kinds)
        vit = list(self._vit)
        lat = list(self._lat)
        if extra_noisy is not None:
            start = len(ids)
            segments.append(
                Segment(SegKind.VAE_NOISY, start, LATENT_TOKENS, extra_noisy))
            ids.extend([-1] * LATENT_TOKENS)
            kinds.extend([int(SegKind.VAE_NOISY)] * LATENT_TOKENS)
            zeros_v = np.zeros(self.d_model, dtype=np.float32)
            zeros_l = np.zeros(LATENT_PATCH_DIM, dtype=np.float32)
            vit.extend([zeros_v] * LATENT_TOKENS)
            lat.extend([zeros_l] * LATENT_TOKENS)
        if mask_mode == "dpcw":
            mask = build_dpcw_mask(segments, window_w, dense_seg, refs)
        else:
            mask = build_causal_mm_mask(segments)
        return Row(
            ids=np.asarray(ids, dtype=np.int64),
            kinds=np.asarray(kinds, dtype=np.int8),
            mask=mask,
            positions=assign_positions(segments),
            vit=np.stack(vit) if vit else np.zeros((0, self.d_model), np.float32),
            latents=np.stack(lat) if lat else np.zeros((0, LATENT_PATCH_DIM), np.float32),
        )

    def sequence(self) -> InterleavedSequence:
        return InterleavedSequence(
            ids=list(self.ids), segments=list(self.segments),
            prompt_len=self.prompt_len,
        )


def assemble_prompt(prompt_ids: list[int], ref_images: list[np.ndarray],
                    d_model: int, vit_seed: int, vae_seed: int) -> History:
    """Lay the prompt out as history: each <BOI> binds the next reference image."""
    for tid in prompt_ids:
        if not 0 <= tid < len(VOCAB):
            raise PromptParseError(f"prompt id {tid} outside the vocabulary")
        if tid in (IMAGINE_OPEN, IMAGINE_CLOSE):
            raise PromptParseError("imagine markers are not allowed in prompts")
    n_boi = sum(1 for t in prompt_ids if t == BOI)
    if n_boi != len(ref_images):
        raise PromptParseError(
            f"prompt has {n_boi} <BOI> slots but {len(ref_images)} reference "
            "images were supplied")
    hist = History(d_model)
    ordinal = 0
    for tid in prompt_ids:
        hist.append_text(tid)
        if tid == BOI:
            img = np.asarray(ref_images[ordinal], dtype=np.float32)
            hist.append_image(
                vit_encode(img, d_model, vit_seed),
                latent_to_patches(vae_encode(img, vae_seed)),
                ordinal,
            )
            ordinal += 1
    hist.prompt_len = len(hist)
    # positions appended above predate the boundary; they are prompt, not response
    hist.resp_text_flat.clear()
    return hist


# =============================================================================
# Decoding
# =============================================================================

def _next_logits(state: ModelState, hist: History) -> torch.Tensor:
    batch = pack_rows([hist.row()], state.cfg.d_model,
                      state.cfg.latent_patch_dim)
    with torch.no_grad():
        out = forward_joint(state, batch)
    return out.logits[0, hist.last_text_pos()]


def generate_until_boundary(state: ModelState, hist: History,
                            cfg: GenerationConfig, *, budget: int,
                            logits_fn=None,
                            gen: torch.Generator | None = None
                            ) -> tuple[list[int], str]:
    """Decode text until <BOI> (inclusive), <EOS>, or the token budget.

    Returns (emitted ids, boundary), boundary in {"BOI", "EOS", "LIMIT"}.
    logits_fn(hist) replaces the model call for stub-driven tests.
    """
    emitted: list[int] = []
    while True:
        if budget <= 0:
            return emitted, "LIMIT"
        logits = logits_fn(hist) if logits_fn is not None \
            else _next_logits(state, hist)
        if cfg.temperature <= 0.0:
            tid = int(torch.argmax(logits))
        else:
            probs = torch.softmax(logits / cfg.temperature, dim=-1)
            tid = int(torch.multinomial(probs, 1, generator=gen))
        hist.append_text(tid)
        emitted.append(tid)
        budget -= 1
        if tid == BOI:
            return emitted, "BOI"
        if tid == EOS:
            return emitted, "EOS"


def _image_seed(base_seed: int, ordinal: int) -> int:
    ss = np.random.SeedSequence(base_seed, spawn_key=(ordinal,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def interleaved_generate(state: ModelState, prompt_ids: list[int],
                         ref_images: list[np.ndarray],
                         cfg: GenerationConfig = GenerationConfig(), *,
                         logits_fn=None, image_fn=None) -> GenerationResult:
    """Run the full text-image-text loop from a prompt.

    image_fn(dense_text, ordinal) -> (64, patch_dim) latent patches replaces
    the flow sampler for stub-driven tests.
    """
    mc = state.cfg
    hist = assemble_prompt(prompt_ids, ref_images, mc.d_model,
                           mc.vit_seed, mc.vae_seed)
    gen = torch.Generator().manual_seed(cfg.seed) if cfg.temperature > 0 else None

    images: list[np.ndarray] = []
    dense_prompts: list[str] = []
    grammar_broken = False
    stop_reason = None

    while True:
        budget = cfg.max_text_tokens - len(hist.resp_text_flat)
        _, boundary = generate_until_boundary(
            state, hist, cfg, budget=budget, logits_fn=logits_fn, gen=gen)
        if boundary == "EOS":
            stop_reason = "EOS"
            break
        if boundary == "LIMIT":
            stop_reason = "MAX_TOKENS"
            break
        # boundary == BOI
        if len(images) >= cfg.max_images:
            # drop the trigger so generated images and BOI markers stay 1:1
            hist.pop_text()
            stop_reason = "MAX_IMAGES"
            break
        resp = hist.response_text_ids()
        parse = parse_interleaved(resp)
        dense_ok = (
            parse.valid
            and parse.dense_spans
            and parse.boi_positions
            and parse.boi_positions[-1] == len(resp) - 1
            and parse.dense_spans[-1][1] == len(resp) - 2  # close right before
            and parse.dense_spans[-1][1] > parse.dense_spans[-1][0]
        )
        if not dense_ok:
            hist.pop_text()
            grammar_broken = True
            stop_reason = "MALFORMED"
            break
        a, b = parse.dense_spans[-1]
        dense_ids = resp[a:b]
        flat_start = hist.resp_text_flat[a]
        flat_end = hist.resp_text_flat[b - 1] + 1
        dense_seg = hist.mark_dense(flat_start, flat_end)

        # image-block ordinals are global: prompt references come first
        ordinal = len(ref_images) + len(images)
        dense_text = detokenize(dense_ids)
        if image_fn is not None:
            patches = np.asarray(image_fn(dense_text, ordinal), dtype=np.float32)
        else:
            row = hist.row(
                extra_noisy=ordinal, mask_mode=cfg.mask_mode,
                window_w=cfg.window_w, dense_seg=dense_seg,
                refs=tuple(range(ordinal)),
            )
            batch = pack_rows([row], mc.d_model, mc.latent_patch_dim)
            patches = sample_image(
                state, batch, cfg.sampler_steps,
                _image_seed(cfg.seed, ordinal),
            )[0].numpy()
        decoded = vae_decode(patches_to_latent(patches), mc.vae_seed)
        images.append(np.clip(decoded, -1.0, 1.0))
        dense_prompts.append(dense_text)
        hist.append_image(
            vit_encode(decoded, mc.d_model, mc.vit_seed),
            latent_to_patches(vae_encode(decoded, mc.vae_seed)),
            ordinal,
        )

    grammar_valid = (not grammar_broken) \
        and parse_interleaved(hist.response_text_ids()).valid
    seq = hist.sequence()
    seq.validate()
    return GenerationResult(
        sequence=seq,
        images=images,
        dense_prompts=dense_prompts,
        grammar_valid=grammar_valid,
        stop_reason=stop_reason,
        response_text=detokenize(hist.response_text_ids()),
        prompt_text=detokenize(prompt_ids),
    )


# =============================================================================
# Output bundles
# =============================================================================

def write_bundle(result: GenerationResult, out_dir, *,
                 config: GenerationConfig | None = None,
                 extra_meta: dict | None = None) -> None:
    """Write transcript.txt, img_%03d.raw, and meta.json for one generation."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "transcript.txt").write_text(result.response_text + "\n",
                                        encoding="utf-8")
    for i, img in enumerate(result.images):
        save_raw(out / f"img_{i:03d}.raw", img)
    meta = {
        "stop_reason": result.stop_reason,
        "image_count": len(result.images),
        "dense_prompts": result.dense_prompts,
        "grammar_valid": result.grammar_valid,
        "prompt": result.prompt_text,
        "response": result.response_text,
    }
    if config is not None:
        meta["generation"] = {
            "max_images": config.max_images,
            "max_text_tokens": config.max_text_tokens,
            "sampler_steps": config.sampler_steps,
            "temperature": config.temperature,
            "mask_mode": config.mask_mode,
            "window_w": config.window_w,
            "seed": config.seed,
        }
    for k, v in (extra_meta or {}).items():
        meta[str(k)] = v
    (out / "meta.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")


def read_bundle(bundle_dir) -> dict:
    """Load a bundle's meta plus decoded images."""
    from .toyworld import load_raw

    path = Path(bundle_dir)
    meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    images = []
    for i in range(int(meta.get("image_count", 0))):
        images.append(load_raw(path / f"img_{i:03d}.raw"))
    meta["images"] = images
    return meta

"""Mixture-of-experts transformer.

One pre-norm layer stack walked by two parameter sets — the planner expert
(text + ViT tokens, next-token head) and the visualizer expert (VAE latent
tokens, velocity head) — with attention computed jointly over the whole
sequence under a caller-supplied mask. Tokens are routed to their owner
expert's parameters by gather/scatter, so each expert's gradients touch only
its own tokens' compute paths.

The visualizer is a rectified-flow denoiser: training regresses the constant
velocity x0 - x1 of the linear path x_t = (1 - t) x1 + t x0, and sampling
integrates the learned field from t = 1 (noise) to t = 0 with Euler steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import VOCAB, SegKind
from .rope3d import rope_angles, rotate_pairs

TIME_FREQ_SCALE = 1000.0  # flow time lives in [0, 1]; scale up for the ladder


# =============================================================================
# Errors
# =============================================================================

class ShapeError(ValueError):
    """Batch tensors have inconsistent shapes."""


class MaskMismatch(ValueError):
    """Mask/positions do not match the sequence layout."""


class ContextError(ValueError):
    """Sampling context lacks a dense prompt or a noisy block."""


class EmptyResponse(ValueError):
    """No response-region tokens to take a language loss over."""


# =============================================================================
# Configuration
# =============================================================================

@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 96
    n_heads: int = 2
    head_width: int = 48
    vocab_size: int = len(VOCAB)
    ffn_mult: int = 4
    latent_patch_dim: int = 48
    vit_seed: int = 11
    vae_seed: int = 13

    def __post_init__(self):
        if self.n_heads * self.head_width != self.d_model:
            raise ValueError(
                f"d_model {self.d_model} != n_heads {self.n_heads} x "
                f"head_width {self.head_width}"
            )
        if self.head_width % 6 != 0:
            raise ValueError(f"head_width must be divisible by 6 for 3D RoPE")
        if not 0 < self.vocab_size <= 512:
            raise ValueError(f"vocab_size out of range: {self.vocab_size}")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "head_width": self.head_width,
            "vocab_size": self.vocab_size, "ffn_mult": self.ffn_mult,
            "latent_patch_dim": self.latent_patch_dim,
            "vit_seed": self.vit_seed, "vae_seed": self.vae_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


# =============================================================================
# Modules
# =============================================================================

class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class Block(nn.Module):
    """One expert's parameters for one layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = RMSNorm(d)
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.out = nn.Linear(d, d, bias=False)
        self.norm2 = RMSNorm(d)
        self.ff1 = nn.Linear(d, cfg.ffn_mult * d)
        self.ff2 = nn.Linear(cfg.ffn_mult * d, d)


class Expert(nn.Module):
    """Per-expert parameter set: layer blocks plus the modality-specific ends."""

    def __init__(self, cfg: ModelConfig, role: str):
        super().__init__()
        assert role in ("planner", "visualizer")
        self.role = role
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = RMSNorm(cfg.d_model)
        if role == "planner":
            self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
            self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        else:
            self.patch_in = nn.Linear(cfg.latent_patch_dim, cfg.d_model)
            self.patch_out = nn.Linear(cfg.d_model, cfg.latent_patch_dim)
            self.time_in = nn.Linear(cfg.d_model, cfg.d_model)
            self.time_out = nn.Linear(cfg.d_model, cfg.d_model)

    def time_embed(self, t: torch.Tensor, d_model: int) -> torch.Tensor:
        """Sinusoidal embedding of flow time through a small MLP; (B, D)."""
        half = d_model // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=t.dtype, device=t.device) / half
        )
        args = t[:, None] * TIME_FREQ_SCALE * freqs[None, :]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return self.time_out(F.silu(self.time_in(emb)))


class ModelState(nn.Module):
    """The two expert parameter sets plus the immutable config."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.planner = Expert(cfg, "planner")
        self.visualizer = Expert(cfg, "visualizer")

    def expert(self, name: str) -> Expert:
        if name not in ("planner", "visualizer"):
            raise ValueError(f"unknown expert {name!r}")
        return getattr(self, name)


# weights that read the residual stream take 1/sqrt(fan_in) so attention
# logits and gate activations start at unit scale; weights that write back
# into the stream stay small to keep early updates stable. patch_in starts
# small so noisy-token inputs are dominated by the shared time embedding
# rather than per-sample noise: queries over text stay stable across samples,
# which is what lets the grid-position attention patterns form.
_READ_SIDE = ("qkv", "ff1", "time_in", "time_out")


def new_model(cfg: ModelConfig, seed: int,
              dtype: torch.dtype = torch.float32) -> ModelState:
    """Seeded deterministic init: unit norm gains, zero biases, scaled weights."""
    state = ModelState(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in state.named_parameters():
            if "norm" in name:
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            elif any(f".{part}." in name for part in _READ_SIDE):
                p.normal_(0.0, p.shape[1] ** -0.5, generator=gen)
            else:
                p.normal_(0.0, 0.02, generator=gen)
    return state.to(dtype)


# =============================================================================
# Packed batches
# =============================================================================

@dataclass
class Row:
    """One unpadded sample: flat arrays aligned with its segment layout."""

    ids: np.ndarray                 # (L,) int64; -1 at image positions
    kinds: np.ndarray               # (L,) int8 SegKind codes
    mask: np.ndarray                # (L, L) bool
    positions: np.ndarray           # (L, 3) int64
    vit: np.ndarray | None = None       # (L, D) f32, zero off VIT rows
    latents: np.ndarray | None = None   # (L, patch_dim) f32, zero off VAE rows
    t: float | None = None
    v_star: np.ndarray | None = None    # (L, patch_dim) f32 flow target
    loss_mask: np.ndarray | None = None  # (L,) bool: response text targets


@dataclass
class PackedBatch:
    """Padded tensor batch consumed by forward_joint.

    This is the materialized flow/language batch: for denoising work, latents
    already hold x_t at the VAE_NOISY positions, t holds the per-sample flow
    time, and v_star holds the regression target x0 - x1.
    """

    ids: torch.Tensor               # (B, L) int64
    kinds: torch.Tensor             # (B, L) int8
    mask: torch.Tensor              # (B, L, L) bool
    positions: torch.Tensor         # (B, L, 3) int64
    vit: torch.Tensor               # (B, L, D)
    latents: torch.Tensor           # (B, L, patch_dim)
    t: torch.Tensor | None = None   # (B,)
    v_star: torch.Tensor | None = None
    loss_mask: torch.Tensor | None = None


def pack_rows(rows: list[Row], d_model: int, patch_dim: int,
              dtype: torch.dtype = torch.float32) -> PackedBatch:
    """Stack rows into one padded batch.

    Padding appends PAD text positions that see only themselves and are seen
    by nothing, so real rows are unaffected by batch composition.
    """
    from .core import PAD

    B = len(rows)
    L = max(len(r.ids) for r in rows)
    ids = np.full((B, L), PAD, dtype=np.int64)
    kinds = np.full((B, L), int(SegKind.TEXT), dtype=np.int8)
    mask = np.zeros((B, L, L), dtype=bool)
    mask[:, np.arange(L), np.arange(L)] = True
    positions = np.zeros((B, L, 3), dtype=np.int64)
    vit = np.zeros((B, L, d_model), dtype=np.float32)
    latents = np.zeros((B, L, patch_dim), dtype=np.float32)
    v_star = np.zeros((B, L, patch_dim), dtype=np.float32)
    loss_mask = np.zeros((B, L), dtype=bool)
    t = np.zeros(B, dtype=np.float32)
    any_t = any(r.t is not None for r in rows)
    any_v = any(r.v_star is not None for r in rows)
    any_lm = any(r.loss_mask is not None for r in rows)
    for b, r in enumerate(rows):
        n = len(r.ids)
        ids[b, :n] = r.ids
        kinds[b, :n] = r.kinds
        mask[b, :n, :n] = r.mask
        positions[b, :n] = r.positions
        if r.vit is not None:
            vit[b, :n] = r.vit
        if r.latents is not None:
            latents[b, :n] = r.latents
        if r.v_star is not None:
            v_star[b, :n] = r.v_star
        if r.loss_mask is not None:
            loss_mask[b, :n] = r.loss_mask
        if r.t is not None:
            t[b] = r.t
    return PackedBatch(
        ids=torch.from_numpy(ids),
        kinds=torch.from_numpy(kinds),
        mask=torch.from_numpy(mask),
        positions=torch.from_numpy(positions),
        vit=torch.from_numpy(vit).to(dtype),
        latents=torch.from_numpy(latents).to(dtype),
        t=torch.from_numpy(t).to(dtype) if any_t else None,
        v_star=torch.from_numpy(v_star).to(dtype) if any_v else None,
        loss_mask=torch.from_numpy(loss_mask) if any_lm else None,
    )


# =============================================================================
# Forward
# =============================================================================

@dataclass
class ForwardOut:
    hidden: torch.Tensor       # (B, L, D)
    logits: torch.Tensor       # (B, L, V), valid on planner-owned rows
    velocity: torch.Tensor     # (B, L, patch_dim), valid on VAE_NOISY rows


def _kind_mask(kinds: torch.Tensor, *wanted: SegKind) -> torch.Tensor:
    out = torch.zeros_like(kinds, dtype=torch.bool)
    for k in wanted:
        out |= kinds == int(k)
    return out


def _route2(fn_p, fn_v, x: torch.Tensor, idx_p: torch.Tensor,
            idx_v: torch.Tensor, out_dim: int) -> torch.Tensor:
    """Apply each expert's map to its own rows of a flat (N, D) tensor."""
    out = x.new_zeros(x.shape[0], out_dim)
    if idx_p.numel():
        out[idx_p] = fn_p(x[idx_p])
    if idx_v.numel():
        out[idx_v] = fn_v(x[idx_v])
    return out


def _validate(state: ModelState, b: PackedBatch) -> None:
    B, L = b.ids.shape
    if b.kinds.shape != (B, L):
        raise ShapeError(f"kinds shape {tuple(b.kinds.shape)} != {(B, L)}")
    if b.mask.shape != (B, L, L):
        raise MaskMismatch(f"mask shape {tuple(b.mask.shape)} != {(B, L, L)}")
    if b.positions.shape != (B, L, 3):
        raise MaskMismatch(
            f"positions shape {tuple(b.positions.shape)} != {(B, L, 3)}"
        )
    if b.vit.shape != (B, L, state.cfg.d_model):
        raise ShapeError(f"vit shape {tuple(b.vit.shape)}")
    if b.latents.shape != (B, L, state.cfg.latent_patch_dim):
        raise ShapeError(f"latents shape {tuple(b.latents.shape)}")
    has_noisy = bool(_kind_mask(b.kinds, SegKind.VAE_NOISY).any())
    if has_noisy and b.t is None:
        raise ShapeError("VAE_NOISY block present but no flow time t")
    if not has_noisy and b.t is not None:
        raise ShapeError("flow time t supplied without a VAE_NOISY block")


def forward_joint(state: ModelState, b: PackedBatch) -> ForwardOut:
    """Run the joint stack: per-token owner-expert compute, shared attention."""
    _validate(state, b)
    cfg = state.cfg
    B, L = b.ids.shape
    D, H, hw = cfg.d_model, cfg.n_heads, cfg.head_width
    dtype = b.vit.dtype

    text_m = _kind_mask(b.kinds, SegKind.TEXT, SegKind.DENSE_PROMPT)
    lat_m = _kind_mask(b.kinds, SegKind.VAE_CLEAN, SegKind.VAE_NOISY)
    noisy_m = _kind_mask(b.kinds, SegKind.VAE_NOISY)

    # --- input embedding, per owner ---
    x = state.planner.tok_embed(b.ids.clamp(min=0)) * text_m[..., None].to(dtype)
    x = x + b.vit
    x = torch.where(lat_m[..., None], state.visualizer.patch_in(b.latents), x)
    if b.t is not None:
        temb = state.visualizer.time_embed(b.t, D)
        x = x + noisy_m[..., None].to(dtype) * temb[:, None, :]

    # visualizer-owned rows are exactly the latent rows
    flat_owner = lat_m.reshape(-1)
    idx_v = flat_owner.nonzero(as_tuple=True)[0]
    idx_p = (~flat_owner).nonzero(as_tuple=True)[0]

    cos, sin = rope_angles(b.positions, hw, dtype=dtype)
    cos_h, sin_h = cos[:, None], sin[:, None]     # broadcast over heads
    attn_mask = b.mask[:, None]                    # (B, 1, L, L) bool

    for bp, bv in zip(state.planner.blocks, state.visualizer.blocks):
        flat = x.reshape(B * L, D)
        qkv = _route2(
            lambda v: bp.qkv(bp.norm1(v)), lambda v: bv.qkv(bv.norm1(v)),
            flat, idx_p, idx_v, 3 * D,
        )
        q, k, v = qkv.view(B, L, 3, H, hw).permute(2, 0, 3, 1, 4).unbind(0)
        q = rotate_pairs(q, cos_h, sin_h)
        k = rotate_pairs(k, cos_h, sin_h)
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        att = att.transpose(1, 2).reshape(B * L, D)
        flat = flat + _route2(bp.out, bv.out, att, idx_p, idx_v, D)
        ffn = _route2(
            lambda v: bp.ff2(F.gelu(bp.ff1(bp.norm2(v)))),
            lambda v: bv.ff2(F.gelu(bv.ff1(bv.norm2(v)))),
            flat, idx_p, idx_v, D,
        )
        x = (flat + ffn).view(B, L, D)

    flat = x.reshape(B * L, D)
    logits = x.new_zeros(B * L, cfg.vocab_size)
    if idx_p.numel():
        logits[idx_p] = state.planner.lm_head(state.planner.final_norm(flat[idx_p]))
    velocity = x.new_zeros(B * L, cfg.latent_patch_dim)
    idx_n = noisy_m.reshape(-1).nonzero(as_tuple=True)[0]
    if idx_n.numel():
        velocity[idx_n] = state.visualizer.patch_out(
            state.visualizer.final_norm(flat[idx_n])
        )
    return ForwardOut(
        hidden=x,
        logits=logits.view(B, L, cfg.vocab_size),
        velocity=velocity.view(B, L, cfg.latent_patch_dim),
    )


# =============================================================================
# Losses
# =============================================================================

def ce_from_output(out: ForwardOut, b: PackedBatch) -> torch.Tensor:
    """Next-token cross-entropy over positions marked in loss_mask."""
    if b.loss_mask is None or not bool(b.loss_mask.any()):
        raise EmptyResponse("batch has no response-region targets")
    target_at = b.loss_mask[:, 1:]                   # positions being predicted
    pred_logits = out.logits[:, :-1][target_at]
    targets = b.ids[:, 1:][target_at]
    return F.cross_entropy(pred_logits, targets)


def flow_from_output(out: ForwardOut, b: PackedBatch) -> torch.Tensor:
    """MSE between predicted velocity and v* = x0 - x1 over noisy positions."""
    if b.v_star is None or b.t is None:
        raise ShapeError("flow batch needs v_star and t")
    noisy = _kind_mask(b.kinds, SegKind.VAE_NOISY)
    n = int(noisy.sum())
    if n == 0:
        raise ShapeError("flow batch has no VAE_NOISY positions")
    diff = (out.velocity - b.v_star) * noisy[..., None].to(out.velocity.dtype)
    return diff.square().sum() / (n * out.velocity.shape[-1])


def planner_loss(state: ModelState, b: PackedBatch) -> torch.Tensor:
    """Mean next-token cross-entropy over response-region text tokens."""
    if b.loss_mask is None or not bool(b.loss_mask.any()):
        raise EmptyResponse("batch has no response-region targets")
    return ce_from_output(forward_joint(state, b), b)


def flow_loss(state: ModelState, b: PackedBatch) -> torch.Tensor:
    """MSE between predicted velocity and the flow target over noisy positions."""
    if b.v_star is None or b.t is None:
        raise ShapeError("flow batch needs v_star and t")
    return flow_from_output(forward_joint(state, b), b)


# =============================================================================
# Sampling
# =============================================================================

def sample_image(state: ModelState, b: PackedBatch, steps: int,
                 seed: int) -> torch.Tensor:
    """Euler-integrate the velocity field from t=1 (seeded noise) to t=0.

    The batch must hold the full context plus one VAE_NOISY block per sample
    (equal lengths); returns the final latent patches, (B, n_noisy, patch_dim).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    noisy = _kind_mask(b.kinds, SegKind.VAE_NOISY)
    if not bool(noisy.any()):
        raise ContextError("no VAE_NOISY block in the sampling context")
    if not bool(_kind_mask(b.kinds, SegKind.DENSE_PROMPT).any()):
        raise ContextError("no dense-prompt span in the sampling context")
    B = b.ids.shape[0]
    per_row = noisy.sum(dim=1)
    n = int(per_row[0])
    if not bool((per_row == n).all()):
        raise ShapeError("rows have differing VAE_NOISY lengths")

    pd = state.cfg.latent_patch_dim
    dtype = b.latents.dtype
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(B, n, pd, generator=gen, dtype=dtype)
    dt = 1.0 / steps
    with torch.no_grad():
        for k in range(steps):
            t_k = 1.0 - k * dt
            latents = b.latents.clone()
            latents[noisy] = x.reshape(-1, pd)
            stepped = replace(
                b, latents=latents,
                t=torch.full((B,), t_k, dtype=dtype), v_star=None,
            )
            vel = forward_joint(state, stepped).velocity[noisy].view(B, n, pd)
            x = x - dt * vel
    return x

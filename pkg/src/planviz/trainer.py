"""Decoupled three-stage training.

Stage order: visualizer (flow matching, planner frozen) -> planner
(cross-entropy on textual-proxy sequences, visualizer frozen) -> a short
visualizer fine-tune under the dense-prompt context-window masks. Each stage
gets a fresh AdamW and a linearly decaying learning rate; a joint mode
(both experts unfrozen, summed losses) exists only as an ablation baseline.

Freezing is verifiable: per-expert FNV-1a hashes over the serialized
parameters are recorded before and after every stage.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (
    BOI, IMAGINE_CLOSE, IMAGINE_OPEN, LayoutError, SegKind, Segment,
    tokenize, validate_segments,
)
from .masks import build_causal_mm_mask, build_dpcw_mask
from .model import (
    ModelConfig, ModelState, PackedBatch, Row, ce_from_output,
    flow_from_output, forward_joint, pack_rows,
)
from .rope3d import assign_positions
from .toyworld import (
    CATEGORIES, DataSample, LATENT_PATCH_DIM, LATENT_TOKENS, VIT_TOKENS,
    WorldCache, read_manifest, synth_dataset,
)


# =============================================================================
# Errors
# =============================================================================

class DataMissing(ValueError):
    """A stage's required data categories are absent or empty."""


class IoError(Exception):
    """Checkpoint file unreadable: bad magic, truncation, or garbage."""


class ConfigMismatch(Exception):
    """Checkpoint config or parameter inventory disagrees with expectations."""


class HashMismatch(Exception):
    """Stored per-expert hash does not match the loaded payload."""


# =============================================================================
# Hashing
# =============================================================================

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a over a byte string (optionally continuing a running hash)."""
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _expert_param_items(state: ModelState, expert: str) -> list[tuple[str, torch.Tensor]]:
    module = state.expert(expert)
    return sorted(module.named_parameters(), key=lambda kv: kv[0])


def _param_payload(p: torch.Tensor) -> bytes:
    return np.ascontiguousarray(
        p.detach().cpu().numpy().astype("<f4")
    ).tobytes()


def expert_hash(state: ModelState, expert: str) -> int:
    """FNV-1a over the expert's serialized parameters in name-sorted order."""
    h = FNV_OFFSET
    for _, p in _expert_param_items(state, expert):
        h = fnv1a64(_param_payload(p), h)
    return h


# =============================================================================
# Data pools
# =============================================================================

VIS_MIX = ("T2I", "SI2I", "MI2I")
# per-item category probabilities for the planner stage: generation
# categories carry five times the total weight of understanding
PLANNER_MIX_P = {
    "UNDERSTANDING": 1.0 / 6.0,
    "T2I": 5.0 / 24.0,
    "SI2I": 5.0 / 24.0,
    "MI2I": 5.0 / 24.0,
    "INTERLEAVED": 5.0 / 24.0,
}

STAGE_VISUALIZER = "visualizer"
STAGE_PLANNER = "planner"
STAGE_DPCW = "dpcw"
STAGE_JOINT = "joint"
STAGES = (STAGE_VISUALIZER, STAGE_PLANNER, STAGE_DPCW, STAGE_JOINT)
STAGE_IDS = {name: i for i, name in enumerate(STAGES)}

_STAGE_NEEDS = {
    STAGE_VISUALIZER: VIS_MIX,
    STAGE_DPCW: VIS_MIX,
    STAGE_JOINT: VIS_MIX,
    STAGE_PLANNER: CATEGORIES,
}


class DataPools:
    """Per-category sample lists feeding the stage batch samplers."""

    def __init__(self, pools: dict[str, list[DataSample]]):
        self.pools = {k: list(v) for k, v in pools.items()}

    @classmethod
    def from_manifests(cls, data_dir) -> "DataPools":
        root = Path(data_dir)
        pools = {}
        for cat in CATEGORIES:
            manifest = root / cat.lower() / "manifest.jsonl"
            if manifest.exists():
                pools[cat] = read_manifest(manifest)
        return cls(pools)

    @classmethod
    def from_synth(cls, counts: dict[str, int], seed: int) -> "DataPools":
        return cls({
            cat: synth_dataset(cat, n, seed)
            for cat, n in counts.items() if n > 0
        })

    def require(self, stage: str) -> None:
        missing = [
            cat for cat in _STAGE_NEEDS[stage]
            if not self.pools.get(cat)
        ]
        if missing:
            raise DataMissing(
                f"stage {stage!r} needs non-empty categories {missing}"
            )


# =============================================================================
# Sequence materialization
# =============================================================================

@dataclass
class MaterializedSeq:
    """A sample laid out as flat ids + segments, ready for array filling."""

    ids: np.ndarray            # (L,) int64, -1 at image block positions
    kinds: np.ndarray          # (L,) int8
    segments: list[Segment]
    prompt_len: int
    ref_ordinals: tuple[int, ...]
    dense_seg: Segment | None  # response dense span (flow mode)
    vit_segs: list[Segment]
    clean_segs: list[Segment]
    noisy_seg: Segment | None


def _split_text_segments(ids: list[int], start: int,
                         pieces: list) -> None:
    """Append TEXT/DENSE pieces for a flat run of text ids.

    The imagine markers stay TEXT; the enclosed words form a DENSE_PROMPT
    segment. The ids are assumed grammatical (synthesized).
    """
    run_start = 0
    inside = False
    for i, tid in enumerate(ids):
        if tid == IMAGINE_OPEN:
            # text up to and including the opener
            pieces.append(("text", ids[run_start:i + 1]))
            run_start = i + 1
            inside = True
        elif tid == IMAGINE_CLOSE:
            if inside and i > run_start:
                pieces.append(("dense", ids[run_start:i]))
            run_start = i
            inside = False
    if run_start < len(ids):
        pieces.append(("text", ids[run_start:]))


def build_sequence(sample: DataSample, mode: str) -> MaterializedSeq:
    """Lay a sample out as a flat multimodal sequence.

    mode "planner": textual-proxy — reference images become ViT blocks, the
    response stays pure text (each planned image is represented only by its
    dense prompt).
    mode "flow": reference images become ViT + clean-latent block pairs and
    the response is truncated after its first <BOI>, followed by one noisy
    latent block for denoising.
    """
    if mode not in ("planner", "flow"):
        raise ValueError(f"mode must be planner|flow, got {mode!r}")
    prompt_ids = tokenize(sample.prompt)
    response_ids = tokenize(sample.response)

    # pieces: ("text"|"dense", ids) or ("vit"|"clean"|"noisy", ordinal)
    pieces: list[tuple] = []
    ordinal = 0
    run: list[int] = []
    for tid in prompt_ids:
        run.append(tid)
        if tid == BOI:
            pieces.append(("text", run))
            run = []
            pieces.append(("vit", ordinal))
            if mode == "flow":
                pieces.append(("clean", ordinal))
            ordinal += 1
    if run:
        pieces.append(("text", run))
    n_refs = ordinal
    prompt_pieces = len(pieces)

    if mode == "planner":
        _split_text_segments(response_ids, 0, pieces)
    else:
        if BOI not in response_ids:
            raise LayoutError(
                f"sample {sample.sample_id!r} has no <BOI> in its response"
            )
        upto = response_ids.index(BOI) + 1
        _split_text_segments(response_ids[:upto], 0, pieces)
        pieces.append(("noisy", n_refs))

    # assemble flat arrays + segments
    flat_ids: list[int] = []
    kinds: list[int] = []
    segments: list[Segment] = []
    prompt_len = 0
    dense_seg = None
    vit_segs, clean_segs = [], []
    noisy_seg = None
    for pidx, (tag, payload) in enumerate(pieces):
        start = len(flat_ids)
        if tag in ("text", "dense"):
            kind = SegKind.TEXT if tag == "text" else SegKind.DENSE_PROMPT
            if not payload:
                continue
            seg = Segment(kind, start, len(payload))
            flat_ids.extend(payload)
            kinds.extend([int(kind)] * len(payload))
            if tag == "dense" and pidx >= prompt_pieces:
                dense_seg = dense_seg or seg
        else:
            kind = {
                "vit": SegKind.VIT_IMG,
                "clean": SegKind.VAE_CLEAN,
                "noisy": SegKind.VAE_NOISY,
            }[tag]
            length = LATENT_TOKENS if kind is not SegKind.VIT_IMG else VIT_TOKENS
            seg = Segment(kind, start, length, ordinal=payload)
            flat_ids.extend([-1] * length)
            kinds.extend([int(kind)] * length)
            if kind is SegKind.VIT_IMG:
                vit_segs.append(seg)
            elif kind is SegKind.VAE_CLEAN:
                clean_segs.append(seg)
            else:
                noisy_seg = seg
        segments.append(seg)
        if pidx == prompt_pieces - 1:
            prompt_len = len(flat_ids)
    validate_segments(segments)
    return MaterializedSeq(
        ids=np.asarray(flat_ids, dtype=np.int64),
        kinds=np.asarray(kinds, dtype=np.int8),
        segments=segments,
        prompt_len=prompt_len,
        ref_ordinals=tuple(range(n_refs)),
        dense_seg=dense_seg,
        vit_segs=vit_segs,
        clean_segs=clean_segs,
        noisy_seg=noisy_seg,
    )


# -----------------------------------------------------------------------------
# Layout-keyed mask/position cache
# -----------------------------------------------------------------------------

_layout_cache: dict = {}


def _layout_key(segments: list[Segment]) -> tuple:
    return tuple((int(s.kind), s.start, s.length, s.ordinal) for s in segments)


def masked_layout(segments: list[Segment], mask_mode: str, *,
                  window_w: int = 0,
                  dense_seg: Segment | None = None,
                  ref_ordinals: tuple[int, ...] = ()) -> tuple[np.ndarray, np.ndarray]:
    """(mask, positions) for a layout, cached — training revisits few layouts."""
    key = (_layout_key(segments), mask_mode, window_w, ref_ordinals,
           None if dense_seg is None else (dense_seg.start, dense_seg.length))
    hit = _layout_cache.get(key)
    if hit is not None:
        return hit
    if mask_mode == "base":
        mask = build_causal_mm_mask(segments)
    elif mask_mode == "dpcw":
        if dense_seg is None:
            raise ValueError("dpcw mode needs the response dense span")
        mask = build_dpcw_mask(segments, window_w, dense_seg, ref_ordinals)
    else:
        raise ValueError(f"mask_mode must be base|dpcw, got {mask_mode!r}")
    positions = assign_positions(segments)
    _layout_cache[key] = (mask, positions)
    return mask, positions


# -----------------------------------------------------------------------------
# Row builders
# -----------------------------------------------------------------------------

def _fill_refs(mat: MaterializedSeq, sample: DataSample, world: WorldCache,
               vit: np.ndarray, latents: np.ndarray | None) -> None:
    for seg in mat.vit_segs:
        idx = world.index(sample.ref_specs[seg.ordinal])
        vit[seg.start:seg.end] = world.vit_tokens[idx]
    if latents is not None:
        for seg in mat.clean_segs:
            idx = world.index(sample.ref_specs[seg.ordinal])
            latents[seg.start:seg.end] = world.latent_patches[idx]


def _response_text_mask(mat: MaterializedSeq) -> np.ndarray:
    lm = np.zeros(len(mat.ids), dtype=bool)
    for seg in mat.segments:
        if seg.kind in (SegKind.TEXT, SegKind.DENSE_PROMPT):
            lo = max(seg.start, mat.prompt_len)
            if lo < seg.end:
                lm[lo:seg.end] = True
    return lm


def planner_row(sample: DataSample, world: WorldCache) -> Row:
    mat = build_sequence(sample, "planner")
    mask, positions = masked_layout(mat.segments, "base")
    vit = np.zeros((len(mat.ids), world.d_model), dtype=np.float32)
    _fill_refs(mat, sample, world, vit, None)
    return Row(
        ids=mat.ids, kinds=mat.kinds, mask=mask, positions=positions,
        vit=vit, loss_mask=_response_text_mask(mat),
    )


def flow_row(sample: DataSample, world: WorldCache, mask_mode: str,
             window_w: int, rng: np.random.Generator) -> Row:
    mat = build_sequence(sample, "flow")
    mask, positions = masked_layout(
        mat.segments, mask_mode, window_w=window_w,
        dense_seg=mat.dense_seg, ref_ordinals=mat.ref_ordinals,
    )
    L = len(mat.ids)
    vit = np.zeros((L, world.d_model), dtype=np.float32)
    latents = np.zeros((L, LATENT_PATCH_DIM), dtype=np.float32)
    _fill_refs(mat, sample, world, vit, latents)

    x1 = world.latent_patches[world.index(sample.target_specs[0])]
    t = float(rng.uniform())
    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    seg = mat.noisy_seg
    latents[seg.start:seg.end] = (1.0 - t) * x1 + t * x0
    v_star = np.zeros((L, LATENT_PATCH_DIM), dtype=np.float32)
    v_star[seg.start:seg.end] = x0 - x1
    return Row(
        ids=mat.ids, kinds=mat.kinds, mask=mask, positions=positions,
        vit=vit, latents=latents, t=t, v_star=v_star,
        loss_mask=_response_text_mask(mat),
    )


# -----------------------------------------------------------------------------
# Batch samplers
# -----------------------------------------------------------------------------

def sample_planner_categories(rng: np.random.Generator, n: int) -> list[str]:
    """Per-item category draw at the generation:understanding weighting."""
    p = np.array([PLANNER_MIX_P[c] for c in CATEGORIES])
    picks = rng.choice(len(CATEGORIES), size=n, p=p)
    return [CATEGORIES[i] for i in picks]


def make_planner_batch(pools: DataPools, world: WorldCache,
                       rng: np.random.Generator, batch_size: int,
                       dtype: torch.dtype = torch.float32) -> PackedBatch:
    rows = []
    for cat in sample_planner_categories(rng, batch_size):
        pool = pools.pools[cat]
        rows.append(planner_row(pool[int(rng.integers(len(pool)))], world))
    return pack_rows(rows, world.d_model, LATENT_PATCH_DIM, dtype)


def make_flow_batch(pools: DataPools, world: WorldCache,
                    rng: np.random.Generator, batch_size: int, category: str,
                    mask_mode: str, window_w: int,
                    dtype: torch.dtype = torch.float32) -> PackedBatch:
    pool = pools.pools[category]
    rows = [
        flow_row(pool[int(rng.integers(len(pool)))], world, mask_mode,
                 window_w, rng)
        for _ in range(batch_size)
    ]
    return pack_rows(rows, world.d_model, LATENT_PATCH_DIM, dtype)


# =============================================================================
# Stage plans and the training loop
# =============================================================================

@dataclass(frozen=True)
class StagePlan:
    stage: str
    steps: int
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eval_every: int = 50
    eval_batch_size: int = 32
    window_w: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class StageMetrics:
    stage: str
    steps: int
    eval_steps: list[int] = field(default_factory=list)
    eval_losses: list[float] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    pre_hashes: dict = field(default_factory=dict)
    post_hashes: dict = field(default_factory=dict)
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "steps": self.steps,
            "eval_steps": self.eval_steps, "eval_losses": self.eval_losses,
            "train_losses": self.train_losses,
            "pre_hashes": {k: f"{v:016x}" for k, v in self.pre_hashes.items()},
            "post_hashes": {k: f"{v:016x}" for k, v in self.post_hashes.items()},
            "wall_s": self.wall_s,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


_STAGE_TRAINS = {
    STAGE_VISUALIZER: ("visualizer",),
    STAGE_DPCW: ("visualizer",),
    STAGE_PLANNER: ("planner",),
    STAGE_JOINT: ("planner", "visualizer"),
}


def _stage_rngs(plan: StagePlan) -> tuple[np.random.Generator, np.random.Generator]:
    sid = STAGE_IDS[plan.stage]
    train = np.random.default_rng(np.random.SeedSequence(plan.seed, spawn_key=(sid,)))
    evals = np.random.default_rng(
        np.random.SeedSequence(plan.seed, spawn_key=(sid, 0xE)))
    return train, evals


def _build_eval_batch(plan: StagePlan, pools: DataPools, world: WorldCache,
                      rng: np.random.Generator) -> PackedBatch:
    """Fixed eval batch: same samples, flow times, and noise draws every eval."""
    if plan.stage == STAGE_PLANNER:
        return make_planner_batch(pools, world, rng, plan.eval_batch_size)
    mask_mode = "dpcw" if plan.stage == STAGE_DPCW else "base"
    rows = []
    for i in range(plan.eval_batch_size):
        cat = VIS_MIX[i % 3]
        pool = pools.pools[cat]
        rows.append(flow_row(pool[int(rng.integers(len(pool)))], world,
                             mask_mode, plan.window_w, rng))
    return pack_rows(rows, world.d_model, LATENT_PATCH_DIM)


def _eval_loss(state: ModelState, plan: StagePlan, batch: PackedBatch) -> float:
    with torch.no_grad():
        out = forward_joint(state, batch)
        if plan.stage == STAGE_PLANNER:
            return float(ce_from_output(out, batch))
        return float(flow_from_output(out, batch))


def run_stage(state: ModelState, plan: StagePlan, pools: DataPools,
              world: WorldCache, *, log=None) -> StageMetrics:
    """Train one stage in place; returns the loss/hash record of the run."""
    pools.require(plan.stage)
    trained = _STAGE_TRAINS[plan.stage]
    metrics = StageMetrics(stage=plan.stage, steps=plan.steps)
    metrics.pre_hashes = {
        e: expert_hash(state, e) for e in ("planner", "visualizer")
    }

    for p in state.parameters():
        p.requires_grad_(False)
    params = []
    for name in trained:
        for p in state.expert(name).parameters():
            p.requires_grad_(True)
            params.append(p)
    opt = torch.optim.AdamW(
        params, lr=plan.lr_start, betas=(plan.beta1, plan.beta2),
        weight_decay=plan.weight_decay, eps=1e-8,
    )

    train_rng, eval_rng = _stage_rngs(plan)
    eval_batch = _build_eval_batch(plan, pools, world, eval_rng)
    mask_mode = "dpcw" if plan.stage == STAGE_DPCW else "base"

    started = time.monotonic()
    metrics.eval_steps.append(0)
    metrics.eval_losses.append(_eval_loss(state, plan, eval_batch))
    denom = max(plan.steps - 1, 1)
    for step in range(plan.steps):
        lr = plan.lr_start + (plan.lr_end - plan.lr_start) * (step / denom)
        for group in opt.param_groups:
            group["lr"] = lr
        if plan.stage == STAGE_PLANNER:
            batch = make_planner_batch(pools, world, train_rng, plan.batch_size)
        else:
            category = VIS_MIX[step % 3]
            batch = make_flow_batch(pools, world, train_rng, plan.batch_size,
                                    category, mask_mode, plan.window_w)
        out = forward_joint(state, batch)
        if plan.stage == STAGE_PLANNER:
            loss = ce_from_output(out, batch)
        elif plan.stage == STAGE_JOINT:
            loss = ce_from_output(out, batch) + flow_from_output(out, batch)
        else:
            loss = flow_from_output(out, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        metrics.train_losses.append(float(loss.detach()))
        done = step + 1
        if done % plan.eval_every == 0 or done == plan.steps:
            ev = _eval_loss(state, plan, eval_batch)
            metrics.eval_steps.append(done)
            metrics.eval_losses.append(ev)
            if log is not None:
                log(f"[{plan.stage}] step {done}/{plan.steps} "
                    f"train {float(loss.detach()):.4f} eval {ev:.4f}")

    for p in state.parameters():
        p.requires_grad_(True)
    metrics.post_hashes = {
        e: expert_hash(state, e) for e in ("planner", "visualizer")
    }
    metrics.wall_s = time.monotonic() - started
    # the joint ablation trains both experts; eval loss reported is flow-only
    if plan.stage == STAGE_JOINT:
        return metrics
    frozen = [e for e in ("planner", "visualizer") if e not in trained]
    for e in frozen:
        assert metrics.pre_hashes[e] == metrics.post_hashes[e], (
            f"frozen expert {e} drifted during stage {plan.stage}"
        )
    return metrics


# =============================================================================
# Checkpoints
# =============================================================================

CKPT_MAGIC = b"WWV1"


def _param_records(state: ModelState) -> list[tuple[str, np.ndarray]]:
    records = []
    for expert in ("planner", "visualizer"):
        for name, p in _expert_param_items(state, expert):
            arr = p.detach().cpu().numpy().astype("<f4")
            records.append((f"{expert}.{name}", arr))
    return records


def optimizer_moments(opt: torch.optim.AdamW,
                      named: list[tuple[str, torch.Tensor]]) -> dict[str, np.ndarray]:
    """Extract AdamW moments keyed by parameter name, for checkpointing."""
    by_id = {id(p): name for name, p in named}
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            name = by_id[id(p)]
            out[f"opt.exp_avg.{name}"] = (
                st["exp_avg"].detach().cpu().numpy().astype("<f4"))
            out[f"opt.exp_avg_sq.{name}"] = (
                st["exp_avg_sq"].detach().cpu().numpy().astype("<f4"))
            out[f"opt.step.{name}"] = np.asarray(
                [float(st["step"])], dtype="<f4")
    return out


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(state: ModelState, path, *, step: int = 0,
                    extra: dict | None = None,
                    moments: dict[str, np.ndarray] | None = None) -> None:
    """Serialize parameters (+ optimizer moments) with per-expert hashes."""
    config = dict(state.cfg.to_dict())
    config["step"] = step
    for k, v in (extra or {}).items():
        config[str(k)] = v
    cfg_bytes = "".join(
        f"{k}={config[k]}\n" for k in sorted(config)).encode("utf-8")

    records = _param_records(state)
    moment_items = sorted((moments or {}).items())
    hashes = {}
    for expert in ("planner", "visualizer"):
        h = FNV_OFFSET
        for name, arr in records:
            if name.startswith(expert + "."):
                h = fnv1a64(np.ascontiguousarray(arr, dtype="<f4").tobytes(), h)
        hashes[expert] = h

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(records) + len(moment_items)))
        for name, arr in records:
            _write_record(fh, name, arr)
        for name, arr in moment_items:
            _write_record(fh, name, arr)
        fh.write(struct.pack("<I", len(hashes)))
        for expert in sorted(hashes):
            raw = expert.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", hashes[expert]))


@dataclass
class LoadedCheckpoint:
    state: ModelState
    config: dict[str, str]
    step: int
    moments: dict[str, np.ndarray]
    hashes: dict[str, int]


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise IoError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


_MODEL_CFG_KEYS = set(ModelConfig().to_dict())


def load_checkpoint(path, expected_cfg: ModelConfig | None = None) -> LoadedCheckpoint:
    """Read a checkpoint back; verifies magic, config, and per-expert hashes."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CKPT_MAGIC:
            raise IoError(f"{path}: bad magic")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config: dict[str, str] = {}
        for line in _read_exact(fh, cfg_len).decode("utf-8").splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise IoError(f"{path}: malformed config line {line!r}")
            config[key] = value
        try:
            cfg = ModelConfig.from_dict(
                {k: config[k] for k in _MODEL_CFG_KEYS})
        except (KeyError, ValueError) as exc:
            raise ConfigMismatch(f"{path}: bad model config: {exc}") from exc
        if expected_cfg is not None and cfg != expected_cfg:
            raise ConfigMismatch(
                f"{path}: checkpoint config {cfg} != expected {expected_cfg}")

        (n_records,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays: dict[str, np.ndarray] = {}
        order: list[str] = []
        for _ in range(n_records):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = [
                struct.unpack("<I", _read_exact(fh, 4))[0]
                for _ in range(ndim)
            ]
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = _read_exact(fh, 4 * count)
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
            order.append(name)
        (n_hashes,) = struct.unpack("<I", _read_exact(fh, 4))
        stored_hashes: dict[str, int] = {}
        for _ in range(n_hashes):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (value,) = struct.unpack("<Q", _read_exact(fh, 8))
            stored_hashes[name] = value

    state = ModelState(cfg)
    expected_names = {name for name, _ in _param_records(state)}
    param_names = [n for n in order if not n.startswith("opt.")]
    if set(param_names) != expected_names:
        raise ConfigMismatch(
            f"{path}: parameter inventory mismatch "
            f"(missing {sorted(expected_names - set(param_names))[:3]}, "
            f"unknown {sorted(set(param_names) - expected_names)[:3]})")
    with torch.no_grad():
        for name, p in state.named_parameters():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigMismatch(
                    f"{path}: {name} has shape {arr.shape}, model wants "
                    f"{tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.copy()))

    for expert, stored in stored_hashes.items():
        h = FNV_OFFSET
        for name in param_names:
            if name.startswith(expert + "."):
                h = fnv1a64(arrays[name].tobytes(), h)
        if h != stored:
            raise HashMismatch(
                f"{path}: {expert} hash {h:016x} != stored {stored:016x}")

    moments = {n: arrays[n] for n in order if n.startswith("opt.")}
    try:
        step = int(config.get("step", "0"))
    except ValueError:
        step = 0
    return LoadedCheckpoint(
        state=state, config=config, step=step, moments=moments,
        hashes=stored_hashes,
    )


# =============================================================================
# Multi-stage pipeline
# =============================================================================

def default_plans(seed: int, *, vis_steps: int = 3000, planner_steps: int = 2000,
                  dpcw_steps: int = 800, **kw) -> list[StagePlan]:
    """The visualizer -> planner -> DPCW schedule with shared knobs."""
    return [
        StagePlan(stage=STAGE_VISUALIZER, steps=vis_steps, seed=seed, **kw),
        StagePlan(stage=STAGE_PLANNER, steps=planner_steps, seed=seed, **kw),
        StagePlan(stage=STAGE_DPCW, steps=dpcw_steps, seed=seed, **kw),
    ]


def run_pipeline(state: ModelState, plans: list[StagePlan], pools: DataPools,
                 world: WorldCache, *, out_dir=None, log=None) -> list[StageMetrics]:
    """Run stages in order; optionally checkpoint + record metrics per stage."""
    all_metrics = []
    for plan in plans:
        metrics = run_stage(state, plan, pools, world, log=log)
        all_metrics.append(metrics)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(
                state, out / f"ckpt_{plan.stage}.bin", step=plan.steps,
                extra={"stage": plan.stage, "seed": plan.seed},
            )
            metrics.save(out / f"metrics_{plan.stage}.json")
    return all_metrics

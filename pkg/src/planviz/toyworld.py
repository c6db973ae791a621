"""Procedural scene world.

A closed 432-spec world (3 shapes x 4 colors x 2 sizes x 3x3 grid x 2
backgrounds) rendered as 32x32x3 images in [-1, 1] via pure integer
rasterization, an exact-inverse orthogonal toy VAE, a frozen seeded ViT
encoder, a nearest-render decoding oracle, and the synthesizer for the five
data categories (T2I, SI2I, MI2I, UNDERSTANDING, INTERLEAVED textual proxy).

Everything is deterministic; the world is small enough that the oracle tests
run exhaustively.
"""

from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass, field

import numpy as np


# =============================================================================
# Errors
# =============================================================================

class ShapeError(ValueError):
    """Array input has the wrong shape."""


class BadCategory(ValueError):
    """Unknown data category."""


class BadCount(ValueError):
    """Sample count must be >= 1."""


# =============================================================================
# Scene specs
# =============================================================================

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
BACKGROUNDS = ("white", "black")
GRID = (0, 1, 2)

COLOR_RGB = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (-1.0, -1.0, -1.0),
}

IMG_SIDE = 32
CELL_CENTERS = (5, 16, 26)  # grid row/col centers; both extents stay in-bounds
EXTENT = {"small": 6, "large": 10}

ATTR_NAMES = ("shape", "color", "size", "position", "background")


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    size: str
    row: int
    col: int
    background: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"bad shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"bad color {self.color!r}")
        if self.size not in SIZES:
            raise ValueError(f"bad size {self.size!r}")
        if self.row not in GRID or self.col not in GRID:
            raise ValueError(f"bad position {(self.row, self.col)!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"bad background {self.background!r}")

    def get(self, attr: str):
        if attr == "position":
            return (self.row, self.col)
        return getattr(self, attr)

    def replace(self, attr: str, value) -> "SceneSpec":
        fields = {
            "shape": self.shape, "color": self.color, "size": self.size,
            "row": self.row, "col": self.col, "background": self.background,
        }
        if attr == "position":
            fields["row"], fields["col"] = value
        elif attr in ("shape", "color", "size", "background"):
            fields[attr] = value
        else:
            raise ValueError(f"bad attribute {attr!r}")
        return SceneSpec(**fields)

    def to_dict(self) -> dict:
        return {
            "shape": self.shape, "color": self.color, "size": self.size,
            "row": self.row, "col": self.col, "background": self.background,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(d["shape"], d["color"], d["size"], d["row"], d["col"],
                   d["background"])


def all_specs() -> list[SceneSpec]:
    """The full world in frozen enumeration order (ties in the oracle break here)."""
    return [
        SceneSpec(sh, co, si, r, c, bg)
        for sh, co, si, r, c, bg in itertools.product(
            SHAPES, COLORS, SIZES, GRID, GRID, BACKGROUNDS
        )
    ]


WORLD_SIZE = 3 * 4 * 2 * 3 * 3 * 2  # 432


# =============================================================================
# Rendering
# =============================================================================

def _shape_rows(spec: SceneSpec) -> np.ndarray:
    """Boolean 32x32 coverage mask for the spec's shape, integer arithmetic only."""
    e = EXTENT[spec.size]
    top = CELL_CENTERS[spec.row] - e // 2
    left = CELL_CENTERS[spec.col] - e // 2
    mask = np.zeros((IMG_SIDE, IMG_SIDE), dtype=bool)
    for dy in range(e):
        for dx in range(e):
            if spec.shape == "square":
                hit = True
            elif spec.shape == "circle":
                # squared distance from box center in half-pixel units
                hit = (2 * dy - (e - 1)) ** 2 + (2 * dx - (e - 1)) ** 2 <= e * e
            else:  # triangle, apex up
                hit = abs(2 * dx - (e - 1)) <= dy + 1
            if hit:
                mask[top + dy, left + dx] = True
    return mask


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Render to a 32x32x3 float32 array in [-1, 1]; bitwise deterministic."""
    img = np.empty((IMG_SIDE, IMG_SIDE, 3), dtype=np.float32)
    img[:] = np.array(COLOR_RGB[spec.background], dtype=np.float32)
    img[_shape_rows(spec)] = np.array(COLOR_RGB[spec.color], dtype=np.float32)
    return img


# =============================================================================
# Dense-prompt templates
# =============================================================================

def describe_scene(spec: SceneSpec) -> str:
    """Canonical dense-prompt template; inverted by parse_description."""
    return (
        f"a {spec.size} {spec.color} {spec.shape} at {spec.row} {spec.col} "
        f"on {spec.background} background"
    )


def describe_scene_short(spec: SceneSpec) -> str:
    """Short-form dense prompt; size/background implied (small / white)."""
    return f"{spec.color} {spec.shape} at {spec.row} {spec.col}"


def parse_description(text: str) -> SceneSpec:
    """Invert describe_scene (full template) or describe_scene_short."""
    words = text.split()
    if len(words) == 10 and words[0] == "a" and words[4] == "at" and words[7] == "on":
        return SceneSpec(
            shape=words[3], color=words[2], size=words[1],
            row=int(words[5]), col=int(words[6]), background=words[8],
        )
    if len(words) == 5 and words[2] == "at":
        return SceneSpec(
            shape=words[1], color=words[0], size="small",
            row=int(words[3]), col=int(words[4]), background="white",
        )
    raise ValueError(f"not a dense-prompt template: {text!r}")


# =============================================================================
# Toy VAE (exact inverse) and frozen ViT
# =============================================================================

LATENT_SHAPE = (16, 16, 12)
LATENT_TOKENS = 64          # 8x8 grid of 2x2 latent patches
LATENT_PATCH_DIM = 48       # 2*2*12
VIT_TOKENS = 64             # 8x8 grid of 4x4 image patches
VIT_PATCH_DIM = 48          # 4*4*3

DEFAULT_VAE_SEED = 13
DEFAULT_VIT_SEED = 11


def _space_to_depth(x: np.ndarray, block: int) -> np.ndarray:
    h, w, c = x.shape
    x = x.reshape(h // block, block, w // block, block, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(h // block, w // block, block * block * c)


def _depth_to_space(x: np.ndarray, block: int, channels: int) -> np.ndarray:
    h, w, _ = x.shape
    x = x.reshape(h, w, block, block, channels)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(h * block, w * block, channels)


@functools.lru_cache(maxsize=8)
def _vae_mix(seed: int) -> np.ndarray:
    """Seeded orthogonal 12x12 channel-mixing matrix (float64, sign-normalized QR)."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((12, 12))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def vae_encode(img: np.ndarray, seed: int = DEFAULT_VAE_SEED) -> np.ndarray:
    """2x2 space-to-depth then orthogonal channel mix: (32,32,3) -> (16,16,12)."""
    if img.shape != (IMG_SIDE, IMG_SIDE, 3):
        raise ShapeError(f"expected (32, 32, 3), got {img.shape}")
    x = _space_to_depth(np.asarray(img, dtype=np.float64), 2)
    lat = x @ _vae_mix(seed).T
    return lat.astype(np.float32)


def vae_decode(lat: np.ndarray, seed: int = DEFAULT_VAE_SEED) -> np.ndarray:
    """Exact inverse of vae_encode: (16,16,12) -> (32,32,3)."""
    if lat.shape != LATENT_SHAPE:
        raise ShapeError(f"expected {LATENT_SHAPE}, got {lat.shape}")
    x = np.asarray(lat, dtype=np.float64) @ _vae_mix(seed)
    return _depth_to_space(x, 2, 3).astype(np.float32)


@functools.lru_cache(maxsize=8)
def _vit_proj(seed: int, d_model: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((VIT_PATCH_DIM, d_model)) / np.sqrt(VIT_PATCH_DIM)
    return w.astype(np.float32)


def vit_encode(img: np.ndarray, d_model: int = 96,
               seed: int = DEFAULT_VIT_SEED) -> np.ndarray:
    """Frozen ViT proxy: 4x4 patchify then a seeded linear map to model width.

    Returns (64, d_model) float32. The projection is derived from the seed and
    never trained.
    """
    if img.shape != (IMG_SIDE, IMG_SIDE, 3):
        raise ShapeError(f"expected (32, 32, 3), got {img.shape}")
    patches = _space_to_depth(np.asarray(img, dtype=np.float32), 4)
    return patches.reshape(VIT_TOKENS, VIT_PATCH_DIM) @ _vit_proj(seed, d_model)


def latent_to_patches(lat: np.ndarray) -> np.ndarray:
    """(16,16,12) latent -> (64, 48) row-major 2x2 patches for the model."""
    if lat.shape != LATENT_SHAPE:
        raise ShapeError(f"expected {LATENT_SHAPE}, got {lat.shape}")
    return _space_to_depth(lat, 2).reshape(LATENT_TOKENS, LATENT_PATCH_DIM)


def patches_to_latent(patches: np.ndarray) -> np.ndarray:
    """(64, 48) -> (16,16,12), inverse of latent_to_patches."""
    if patches.shape != (LATENT_TOKENS, LATENT_PATCH_DIM):
        raise ShapeError(f"expected (64, 48), got {patches.shape}")
    return _depth_to_space(patches.reshape(8, 8, LATENT_PATCH_DIM), 2, 12)


# =============================================================================
# Decoding oracle
# =============================================================================

@functools.lru_cache(maxsize=1)
def _reference_stack() -> np.ndarray:
    return np.stack([render_scene(s) for s in all_specs()])


def decode_scene_oracle(img: np.ndarray) -> SceneSpec:
    """Nearest of the 432 reference renders by L2; ties break in enumeration order."""
    if img.shape != (IMG_SIDE, IMG_SIDE, 3):
        raise ShapeError(f"expected (32, 32, 3), got {img.shape}")
    refs = _reference_stack()
    d2 = ((refs - np.asarray(img, dtype=np.float32)) ** 2).sum(axis=(1, 2, 3))
    return all_specs()[int(np.argmin(d2))]


# =============================================================================
# World cache for training/inference
# =============================================================================

class WorldCache:
    """Precomputed per-spec renders, latent patches, and ViT tokens.

    Training touches the same 432 scenes thousands of times; encoding them once
    keeps the step loop on the model, not the encoders.
    """

    def __init__(self, d_model: int = 96, vit_seed: int = DEFAULT_VIT_SEED,
                 vae_seed: int = DEFAULT_VAE_SEED):
        self.d_model = d_model
        self.vit_seed = vit_seed
        self.vae_seed = vae_seed
        self.specs = all_specs()
        self._index = {s: i for i, s in enumerate(self.specs)}
        self.renders = _reference_stack()
        self.latent_patches = np.stack([
            latent_to_patches(vae_encode(r, vae_seed)) for r in self.renders
        ])
        self.vit_tokens = np.stack([
            vit_encode(r, d_model, vit_seed) for r in self.renders
        ])

    def index(self, spec: SceneSpec) -> int:
        return self._index[spec]


# =============================================================================
# Data synthesis
# =============================================================================

CATEGORIES = ("UNDERSTANDING", "T2I", "SI2I", "MI2I", "INTERLEAVED")
CATEGORY_IDS = {name: i for i, name in enumerate(CATEGORIES)}

NUMBER_WORDS = {1: "one", 2: "two", 3: "three", 4: "four"}
ORDINAL_WORDS = ("first", "second", "third", "fourth")
CANONICAL_POSITIONS = ((0, 0), (0, 1), (0, 2), (1, 0))

UNDERSTANDING_QA = {
    "color": ("what color is the shape", lambda s: s.color),
    "shape": ("what shape is the image", lambda s: s.shape),
    "size": ("what size is the shape", lambda s: s.size),
    "background": ("what background is the image", lambda s: s.background),
    "position": ("where is the shape", lambda s: f"{s.row} {s.col}"),
}


@dataclass
class DataSample:
    """One synthesized sample; prompt/response are space-joined token literals.

    Each <BOI> in the prompt stream marks where the next reference image's
    blocks are inserted at assembly time. The response stream is pure text;
    <EOS> terminates it. required_images is the count constraint for
    count-accuracy scoring (INTERLEAVED), else len(target_specs).
    """

    task: str
    seed: int
    prompt: str
    response: str
    ref_specs: list[SceneSpec] = field(default_factory=list)
    target_specs: list[SceneSpec] = field(default_factory=list)
    required_images: int | None = None
    family: str | None = None
    category: str | None = None
    sample_id: str | None = None


def _random_spec(rng: np.random.Generator) -> SceneSpec:
    return SceneSpec(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS[rng.integers(len(COLORS))],
        size=SIZES[rng.integers(len(SIZES))],
        row=GRID[rng.integers(3)],
        col=GRID[rng.integers(3)],
        background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
    )


def _attr_word(value) -> str:
    if isinstance(value, tuple):
        return f"{value[0]} {value[1]}"
    return str(value)


def _synth_t2i(rng, seed) -> DataSample:
    spec = _random_spec(rng)
    dense = describe_scene(spec)
    return DataSample(
        task="T2I", seed=seed,
        prompt=f"<BOS> draw {dense}",
        response=f"<imagine> {dense} </imagine> <BOI> <EOS>",
        target_specs=[spec], required_images=1,
    )


_EDIT_POOL = {
    "shape": SHAPES, "color": COLORS, "size": SIZES,
    "background": BACKGROUNDS,
    "position": tuple((r, c) for r in GRID for c in GRID),
}


def _synth_si2i(rng, seed) -> DataSample:
    ref = _random_spec(rng)
    attr = ATTR_NAMES[rng.integers(len(ATTR_NAMES))]
    options = [v for v in _EDIT_POOL[attr] if v != ref.get(attr)]
    value = options[rng.integers(len(options))]
    edited = ref.replace(attr, value)
    dense = describe_scene(edited)
    return DataSample(
        task="SI2I", seed=seed,
        prompt=f"<BOS> <BOI> change the {attr} to {_attr_word(value)}",
        response=f"<imagine> {dense} </imagine> <BOI> <EOS>",
        ref_specs=[ref], target_specs=[edited], required_images=1,
    )


def _synth_mi2i(rng, seed) -> DataSample:
    ref1 = _random_spec(rng)
    attr_b = ATTR_NAMES[rng.integers(len(ATTR_NAMES))]
    others = [a for a in ATTR_NAMES if a != attr_b]
    attr_a = others[rng.integers(len(others))]
    # ref2's contributed attribute must differ so the combination is visible
    ref2 = _random_spec(rng)
    options = [v for v in _EDIT_POOL[attr_b] if v != ref1.get(attr_b)]
    ref2 = ref2.replace(attr_b, options[rng.integers(len(options))])
    target = ref1.replace(attr_b, ref2.get(attr_b))
    dense = describe_scene(target)
    return DataSample(
        task="MI2I", seed=seed,
        prompt=(
            f"<BOS> <BOI> <BOI> combine the {attr_a} from the first "
            f"and the {attr_b} from the second"
        ),
        response=f"<imagine> {dense} </imagine> <BOI> <EOS>",
        ref_specs=[ref1, ref2], target_specs=[target], required_images=1,
    )


def _synth_understanding(rng, seed) -> DataSample:
    spec = _random_spec(rng)
    attr = ATTR_NAMES[rng.integers(len(ATTR_NAMES))]
    question, answer_fn = UNDERSTANDING_QA[attr]
    return DataSample(
        task="UNDERSTANDING", seed=seed,
        prompt=f"<BOS> <BOI> {question}",
        response=f"{answer_fn(spec)} <EOS>",
        ref_specs=[spec], target_specs=[], required_images=0,
    )


def _interleaved_response(denses: list[str]) -> str:
    parts = []
    for i, dense in enumerate(denses):
        parts.append(f"the {ORDINAL_WORDS[i]} image <imagine> {dense} </imagine> <BOI>")
    parts.append("<EOS>")
    return " ".join(parts)


def _synth_interleaved(rng, seed) -> DataSample:
    family = ("f1", "f2", "f3")[rng.integers(3)]
    if family == "f1":
        # counted colors: first n palette colors in canonical order
        base = _random_spec(rng)
        n = int(rng.integers(1, 5))
        noun = "color" if n == 1 else "colors"
        prompt = (
            f"<BOS> show a {base.size} {base.shape} at {base.row} {base.col} "
            f"on {base.background} background in {NUMBER_WORDS[n]} {noun}"
        )
        targets = [base.replace("color", c) for c in COLORS[:n]]
        denses = [describe_scene(t) for t in targets]
    elif family == "f2":
        # enumerated colors in the order listed
        base = _random_spec(rng)
        n = int(rng.integers(2, 5))
        colors = [str(c) for c in rng.permutation(np.array(COLORS))[:n]]
        prompt = (
            f"<BOS> show a {base.size} {base.shape} at {base.row} {base.col} "
            f"on {base.background} background in {' and '.join(colors)}"
        )
        targets = [base.replace("color", c) for c in colors]
        denses = [describe_scene(t) for t in targets]
    else:
        # counted positions with short dense prompts (small / white implied)
        color = COLORS[rng.integers(len(COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        n = int(rng.integers(1, 5))
        noun = "position" if n == 1 else "positions"
        prompt = f"<BOS> show a {color} {shape} in {NUMBER_WORDS[n]} {noun}"
        targets = [
            SceneSpec(shape, color, "small", r, c, "white")
            for r, c in CANONICAL_POSITIONS[:n]
        ]
        denses = [describe_scene_short(t) for t in targets]
    return DataSample(
        task="INTERLEAVED", seed=seed,
        prompt=prompt, response=_interleaved_response(denses),
        target_specs=targets, required_images=len(targets), family=family,
    )


_SYNTH_FNS = {
    "T2I": _synth_t2i,
    "SI2I": _synth_si2i,
    "MI2I": _synth_mi2i,
    "UNDERSTANDING": _synth_understanding,
    "INTERLEAVED": _synth_interleaved,
}


def synth_sample(category: str, index: int, seed: int) -> DataSample:
    """Synthesize sample `index` of a category stream; independent per index."""
    if category not in CATEGORIES:
        raise BadCategory(f"unknown category {category!r}")
    ss = np.random.SeedSequence(entropy=seed,
                                spawn_key=(CATEGORY_IDS[category], index))
    rng = np.random.default_rng(ss)
    sample = _SYNTH_FNS[category](rng, seed)
    sample.sample_id = f"{category.lower()}_{seed}_{index:05d}"
    return sample


def synth_dataset(category: str, n: int, seed: int) -> list[DataSample]:
    """Deterministic dataset of n samples for one category."""
    if not isinstance(n, int) or n < 1:
        raise BadCount(f"n must be a positive integer, got {n!r}")
    return [synth_sample(category, i, seed) for i in range(n)]


# =============================================================================
# On-disk formats: raw arrays and manifests
# =============================================================================

RAW_MAGIC = b"TOYIMG1\n"


def save_raw(path, arr: np.ndarray) -> None:
    """Raw array file: 8-byte magic, uint32 LE ndim + dims, float32 LE payload."""
    arr = np.asarray(arr, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(np.uint32(arr.ndim).tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        fh.write(arr.astype("<f4").tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != RAW_MAGIC:
            raise IOError(f"{path}: bad magic {magic!r}")
        ndim_b = fh.read(4)
        if len(ndim_b) != 4:
            raise IOError(f"{path}: truncated header")
        ndim = int(np.frombuffer(ndim_b, dtype="<u4")[0])
        dims_b = fh.read(4 * ndim)
        if len(dims_b) != 4 * ndim:
            raise IOError(f"{path}: truncated dims")
        dims = tuple(int(d) for d in np.frombuffer(dims_b, dtype="<u4"))
        count = int(np.prod(dims)) if dims else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise IOError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def sample_to_dict(s: DataSample) -> dict:
    d = {
        "task": s.task, "seed": s.seed, "id": s.sample_id,
        "prompt": s.prompt, "response": s.response,
        "refs": [r.to_dict() for r in s.ref_specs],
        "targets": [t.to_dict() for t in s.target_specs],
        "required_images": s.required_images,
    }
    if s.family is not None:
        d["family"] = s.family
    if s.category is not None:
        d["category"] = s.category
    return d


def sample_from_dict(d: dict) -> DataSample:
    return DataSample(
        task=d["task"], seed=d["seed"], sample_id=d.get("id"),
        prompt=d["prompt"], response=d["response"],
        ref_specs=[SceneSpec.from_dict(r) for r in d["refs"]],
        target_specs=[SceneSpec.from_dict(t) for t in d["targets"]],
        required_images=d.get("required_images"),
        family=d.get("family"), category=d.get("category"),
    )


def write_manifest(path, samples: list[DataSample]) -> None:
    """One sample per line as JSON; the dataset is regenerable from this alone."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_dict(s), sort_keys=True) + "\n")


def read_manifest(path) -> list[DataSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                samples.append(sample_from_dict(json.loads(line)))
    return samples

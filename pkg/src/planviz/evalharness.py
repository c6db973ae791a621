"""Evaluation harness for interleaved generation runs.

Three layers: closed-form accuracies against the procedural world's decoder
oracle (image-count, structural-token, scene-fidelity), battle/win-rate
arithmetic, and a file-based rubric-judge exchange (prompt files out, JSON
scores in) aggregated into per-category report tables. Everything is pure
and offline; wiring a real judge model to the emitted files is deployment
glue that lives elsewhere.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .toyworld import ATTR_NAMES, decode_scene_oracle, read_manifest

# Fixed content-category labels for eval fixtures and report grouping.
EVAL_CATEGORIES = (
    "Encyclopedic Knowledge", "News Media", "Travel Guide", "Daily Life",
    "Food Cooking", "Education Tutorial", "Art Creation", "Fashion Beauty",
    "Media Entertainment", "Product Marketing", "Academic Research",
    "Document Guides", "Social Community", "Reasoning", "Multi-language",
)

# The response's image-count pattern required by each task type.
_TASK_PATTERN = {
    "UNDERSTANDING": lambda n: n == 0,
    "T2I": lambda n: n == 1,
    "SI2I": lambda n: n == 1,
    "MI2I": lambda n: n == 1,
    "INTERLEAVED": lambda n: n >= 1,
}


# =============================================================================
# Errors
# =============================================================================

class UnknownCategory(ValueError):
    pass


class MissingRequirement(ValueError):
    """A record lacks the required-image count needed by the metric."""


class CountMismatch(ValueError):
    """Generated image count differs from the target list (strict mode)."""


class EmptyBattles(ValueError):
    pass


class SchemaError(ValueError):
    """Judge response JSON deviates from the schema; carries the field path."""


class RangeError(ValueError):
    """A judge score falls outside [0, 10]."""


# =============================================================================
# Records
# =============================================================================

@dataclass
class EvalRecord:
    prompt_id: str
    category: str
    task: str
    image_count: int
    required_images: int | None = None
    images: list = field(default_factory=list)
    target_specs: list = field(default_factory=list)
    prompt_text: str = ""
    transcript: str = ""
    dense_prompts: list = field(default_factory=list)
    grammar_valid: bool = True
    n_ref_images: int = 0

    def __post_init__(self):
        if self.category not in EVAL_CATEGORIES:
            raise UnknownCategory(
                f"{self.category!r} is not one of the {len(EVAL_CATEGORIES)} "
                "fixed categories")
        if self.task not in _TASK_PATTERN:
            raise UnknownCategory(f"unknown task type {self.task!r}")
        if self.required_images is not None and self.required_images < 1:
            raise ValueError("required_images must be >= 1 when present")


def load_records(pred_dir, fixtures_dir) -> list[EvalRecord]:
    """Join generation bundles with their fixture manifests into EvalRecords.

    pred_dir holds one bundle directory per sample id; fixtures_dir holds
    <category>/manifest.jsonl files as written by the data synthesizer.
    """
    from .inference import read_bundle

    samples = {}
    order = []
    root = Path(fixtures_dir)
    for manifest in sorted(root.glob("*/manifest.jsonl")):
        for s in read_manifest(manifest):
            samples[s.sample_id] = s
            order.append(s.sample_id)

    records = []
    pred = Path(pred_dir)
    for i, sid in enumerate(order):
        bundle = pred / sid
        if not (bundle / "meta.json").exists():
            continue
        meta = read_bundle(bundle)
        s = samples[sid]
        required = s.required_images if s.task == "INTERLEAVED" else None
        records.append(EvalRecord(
            prompt_id=sid,
            category=s.category or EVAL_CATEGORIES[i % len(EVAL_CATEGORIES)],
            task=s.task,
            image_count=int(meta["image_count"]),
            required_images=required,
            images=meta["images"],
            target_specs=list(s.target_specs),
            prompt_text=meta.get("prompt", ""),
            transcript=meta.get("response", ""),
            dense_prompts=list(meta.get("dense_prompts", [])),
            grammar_valid=bool(meta.get("grammar_valid", True)),
            n_ref_images=len(s.ref_specs),
        ))
    return records


# =============================================================================
# Closed-form accuracies
# =============================================================================

def accuracy_image_count(records: list[EvalRecord]) -> float:
    """Fraction of records whose generated image count equals the requirement."""
    if not records:
        return 0.0
    for r in records:
        if r.required_images is None:
            raise MissingRequirement(
                f"record {r.prompt_id!r} has no required image count")
    hits = sum(1 for r in records if r.image_count == r.required_images)
    return hits / len(records)


def structural_token_accuracy(records: list[EvalRecord]) -> float:
    """Fraction of records whose image count fits their task's pattern."""
    if not records:
        return 0.0
    hits = sum(1 for r in records if _TASK_PATTERN[r.task](r.image_count))
    return hits / len(records)


@dataclass
class FidelityResult:
    exact: float
    per_attribute: dict
    n_records: int
    flagged: list   # prompt ids whose image count mismatched the targets

    def __repr__(self):
        attrs = ", ".join(f"{k}={v:.3f}" for k, v in self.per_attribute.items())
        return (f"FidelityResult(exact={self.exact:.3f}, {attrs}, "
                f"n={self.n_records}, flagged={len(self.flagged)})")


def scene_fidelity(records: list[EvalRecord], *,
                   strict: bool = False) -> FidelityResult:
    """Decode generated images via the world oracle and compare to targets.

    A record is exact when every generated image matches its target spec on
    all five attributes; per-attribute rates use the same per-record
    all-images convention. Records whose image count differs from their
    target count score zero everywhere and are flagged (or raised when
    strict=True).
    """
    scored = [r for r in records if r.target_specs]
    if not scored:
        return FidelityResult(0.0, {a: 0.0 for a in ATTR_NAMES}, 0, [])
    exact_hits = 0
    attr_hits = {a: 0 for a in ATTR_NAMES}
    flagged = []
    for r in scored:
        if len(r.images) != len(r.target_specs):
            if strict:
                raise CountMismatch(
                    f"record {r.prompt_id!r}: {len(r.images)} images for "
                    f"{len(r.target_specs)} targets")
            flagged.append(r.prompt_id)
            continue
        decoded = [decode_scene_oracle(np.asarray(img)) for img in r.images]
        for attr in ATTR_NAMES:
            if all(d.get(attr) == t.get(attr)
                   for d, t in zip(decoded, r.target_specs)):
                attr_hits[attr] += 1
        if all(d == t for d, t in zip(decoded, r.target_specs)):
            exact_hits += 1
    n = len(scored)
    return FidelityResult(
        exact=exact_hits / n,
        per_attribute={a: attr_hits[a] / n for a in ATTR_NAMES},
        n_records=n,
        flagged=flagged,
    )


# =============================================================================
# Battles and win rates
# =============================================================================

_OUTCOMES = ("WIN", "LOSS", "TIE")


@dataclass(frozen=True)
class Battle:
    prompt_id: str
    outcome: str
    forced_outcome: str | None = None   # re-adjudication with ties disallowed

    def __post_init__(self):
        if self.outcome not in _OUTCOMES:
            raise ValueError(f"outcome must be one of {_OUTCOMES}")
        if self.forced_outcome is not None \
                and self.forced_outcome not in ("WIN", "LOSS"):
            raise ValueError("forced_outcome must be WIN or LOSS when present")


def winrates(battles: list[Battle]) -> dict:
    """Win-rate variants; keys absent when their inputs are undefined.

    wo_tie = W/(W+L) (absent when no decisive battles); w_tie0 = W/N;
    w_tie5 = (W + T/2)/N; fdt re-scores every tie by its forced outcome and
    is reported only when every tie carries one.
    """
    if not battles:
        raise EmptyBattles("no battles to score")
    n = len(battles)
    w = sum(1 for b in battles if b.outcome == "WIN")
    l = sum(1 for b in battles if b.outcome == "LOSS")
    ties = [b for b in battles if b.outcome == "TIE"]
    out = {
        "w_tie0": w / n,
        "w_tie5": (w + 0.5 * len(ties)) / n,
    }
    if w + l > 0:
        out["wo_tie"] = w / (w + l)
    if all(b.forced_outcome is not None for b in ties):
        forced_wins = sum(1 for b in ties if b.forced_outcome == "WIN")
        out["fdt"] = (w + forced_wins) / n
    return out


# =============================================================================
# Judge exchange
# =============================================================================

TOP_METRICS = (
    "Prompt Adherence", "Narrative Coordination", "Content Consistency",
    "Image Consistency", "Completeness",
)

CONTENT_SUBS = (
    "Image Text Consistency (Intra-output Coherence)",
    "(Input-to-Image Fidelity)",
    "(Input-to-Text Fidelity)",
)
IMAGE_SUBS = (
    "Multi step Consistency (Entity Consistency)",
    "(Visual Style Uniformity)",
)
LEAF_KEYS = (
    "Prompt Adherence", "Narrative Coordination",
) + CONTENT_SUBS + IMAGE_SUBS + ("Completeness",)

_ANCHORS = (
    "Scoring anchors for every metric: 9-10 the requirement is met flawlessly;"
    " 6-8 minor slips that do not harm the result; 3-5 clear problems that a"
    " reader would notice; 0-2 the requirement is missed outright."
)

_METRIC_GUIDE = (
    ("Prompt Adherence",
     "how faithfully the whole output follows the user's instruction,"
     " including counts, ordering, and requested attributes."),
    ("Narrative Coordination",
     "whether text and images advance one coherent thread, with each image"
     " appearing where the surrounding text calls for it."),
    ("Content Consistency",
     "average of three sub-scores judging agreement between modalities."),
    ("Image Consistency",
     "average of two sub-scores judging visual continuity across images."),
    ("Completeness",
     "whether the output finishes the task with nothing missing and no"
     " dangling fragments."),
)

_SUB_GUIDE = (
    ("Image Text Consistency (Intra-output Coherence)",
     "each generated image depicts what its own surrounding text claims."),
    ("(Input-to-Image Fidelity)",
     "generated images preserve what the input references establish."),
    ("(Input-to-Text Fidelity)",
     "generated text stays faithful to the input prompt and references."),
    ("Multi step Consistency (Entity Consistency)",
     "recurring subjects keep identity and attributes across images."),
    ("(Visual Style Uniformity)",
     "rendering style stays uniform across the image sequence."),
)


def _schema_block() -> str:
    template = {
        "scores": {
            key: {"Score": 0, "Justification": ""} for key in LEAF_KEYS
        }
    }
    return json.dumps(template, indent=1)


def _tagged_stream(text: str, first_tag: int) -> tuple[str, int]:
    """Insert <IMG_k></IMG_k> after each <BOI> marker; returns next tag index."""
    parts = text.split("<BOI>")
    out = [parts[0]]
    k = first_tag
    for chunk in parts[1:]:
        out.append(f"<BOI> <IMG_{k}></IMG_{k}>")
        out.append(chunk)
        k += 1
    return "".join(out), k


def judge_prompt_text(record: EvalRecord) -> str:
    """The full rubric + transcript prompt for one record."""
    lines = [
        "You are an expert judge of interleaved text-and-image generation"
        " quality.",
        "Score the candidate output on the five metrics below, each on a"
        " 0-10 scale.",
        "",
        _ANCHORS,
        "",
        "METRICS",
    ]
    for i, (name, guide) in enumerate(_METRIC_GUIDE, 1):
        lines.append(f"{i}. {name}: {guide}")
        if name == "Content Consistency":
            for sub, sg in _SUB_GUIDE[:3]:
                lines.append(f"   - {sub}: {sg}")
        if name == "Image Consistency":
            for sub, sg in _SUB_GUIDE[3:]:
                lines.append(f"   - {sub}: {sg}")
    prompt_tagged, k = _tagged_stream(record.prompt_text, 0)
    response_tagged, k = _tagged_stream(record.transcript, k)
    lines += [
        "",
        "Images are referenced inline by tags, numbered sequentially from 0"
        " starting with the input images; each image sits between its"
        " <IMG_i> and </IMG_i> tags.",
        "",
        f"CANDIDATE (id {record.prompt_id}, {record.category})",
        f"Prompt: {prompt_tagged}",
        f"Response: {response_tagged}",
        "",
        "Respond with exactly this JSON structure, one entry per metric or"
        " sub-metric, Score an integer or decimal in [0, 10]:",
        _schema_block(),
        "",
    ]
    return "\n".join(lines)


def emit_judge_prompts(records: list[EvalRecord], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for record in records:
        path = out / f"judge_{record.prompt_id}.txt"
        path.write_text(judge_prompt_text(record), encoding="utf-8")
        paths.append(path)
    return paths


@dataclass
class ScoredRecord:
    prompt_id: str
    leaf_scores: dict
    metrics: dict          # the five top-level metrics
    overall: float


def _score_leaves(payload: dict, where: str) -> dict:
    if not isinstance(payload, dict) or "scores" not in payload:
        raise SchemaError(f"{where}: missing top-level 'scores' object")
    scores = payload["scores"]
    if not isinstance(scores, dict):
        raise SchemaError(f"{where}: 'scores' is not an object")
    leaves = {}
    for key in LEAF_KEYS:
        if key not in scores:
            raise SchemaError(f"{where}: scores.{key}: missing")
        entry = scores[key]
        if not isinstance(entry, dict) or "Score" not in entry:
            raise SchemaError(f"{where}: scores.{key}.Score: missing")
        if "Justification" not in entry:
            raise SchemaError(f"{where}: scores.{key}.Justification: missing")
        value = entry["Score"]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{where}: scores.{key}.Score: not a number")
        if not 0.0 <= float(value) <= 10.0:
            raise RangeError(
                f"{where}: scores.{key}.Score: {value} outside [0, 10]")
        leaves[key] = float(value)
    return leaves


def score_from_leaves(prompt_id: str, leaves: dict) -> ScoredRecord:
    metrics = {
        "Prompt Adherence": leaves["Prompt Adherence"],
        "Narrative Coordination": leaves["Narrative Coordination"],
        "Content Consistency":
            sum(leaves[k] for k in CONTENT_SUBS) / len(CONTENT_SUBS),
        "Image Consistency":
            sum(leaves[k] for k in IMAGE_SUBS) / len(IMAGE_SUBS),
        "Completeness": leaves["Completeness"],
    }
    overall = sum(metrics.values()) / len(metrics)
    return ScoredRecord(prompt_id, dict(leaves), metrics, overall)


def ingest_judge_responses(score_dir) -> dict[str, ScoredRecord]:
    """Parse judge_<id>.json files; schema violations name the field path."""
    out = {}
    for path in sorted(Path(score_dir).glob("judge_*.json")):
        prompt_id = path.stem[len("judge_"):]
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path.name}: not valid JSON: {exc}") from exc
        leaves = _score_leaves(payload, path.name)
        out[prompt_id] = score_from_leaves(prompt_id, leaves)
    return out


# =============================================================================
# Report aggregation
# =============================================================================

_REPORT_METRICS = TOP_METRICS + ("overall",)


@dataclass
class Report:
    header: list[str]
    rows: list[list[str]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self.rows)
        return buf.getvalue()

    def to_text(self) -> str:
        widths = [
            max(len(str(r[i])) for r in [self.header] + self.rows)
            for i in range(len(self.header))
        ] if self.rows or self.header else []
        lines = []
        for row in [self.header] + self.rows:
            lines.append("  ".join(
                str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip())
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv(), encoding="utf-8")
        (out / "report.txt").write_text(self.to_text(), encoding="utf-8")


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.4f}"


def _accuracy_cells(records: list[EvalRecord]) -> list[str]:
    structural = structural_token_accuracy(records) if records else None
    counted = [r for r in records if r.required_images is not None]
    count_acc = accuracy_image_count(counted) if counted else None
    with_targets = [r for r in records if r.target_specs]
    fidelity = scene_fidelity(with_targets).exact if with_targets else None
    return [_fmt(structural), _fmt(count_acc), _fmt(fidelity)]


def aggregate_report(records: list[EvalRecord],
                     scored: dict[str, ScoredRecord] | None = None) -> Report:
    """Per-category means (judge metrics + accuracies) with an ALL summary row."""
    scored = scored or {}
    header = (["category", "count"]
              + [m.lower().replace(" ", "_") for m in _REPORT_METRICS]
              + ["structural_acc", "count_acc", "fidelity_exact"])
    rows = []

    def metric_cells(group: list[EvalRecord]) -> list[str]:
        hits = [scored[r.prompt_id] for r in group if r.prompt_id in scored]
        cells = []
        for m in TOP_METRICS:
            cells.append(
                _fmt(sum(s.metrics[m] for s in hits) / len(hits))
                if hits else "")
        cells.append(
            _fmt(sum(s.overall for s in hits) / len(hits)) if hits else "")
        return cells

    for category in EVAL_CATEGORIES:
        group = [r for r in records if r.category == category]
        if not group:
            continue
        rows.append([category, str(len(group))]
                    + metric_cells(group) + _accuracy_cells(group))
    if records:
        rows.append(["ALL", str(len(records))]
                    + metric_cells(records) + _accuracy_cells(records))
    return Report(header=header, rows=rows)

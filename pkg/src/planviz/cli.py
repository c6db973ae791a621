"""Command-line entry point.

Subcommands: synth (write datasets), train (run stages), generate (run the
interleaved loop from a prompt or a fixture directory), eval (closed-form
metrics against fixtures), judge-prompts (emit rubric files), report
(aggregate judge scores + accuracies). Every run echoes its fully resolved
configuration into the output directory so it can be reproduced from the
artifacts alone.

Exit codes: 0 success, 1 usage error (help printed), 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .core import VOCAB, tokenize, write_sequence_fixture
from .evalharness import (
    EVAL_CATEGORIES, accuracy_image_count, aggregate_report, emit_judge_prompts,
    EvalRecord, ingest_judge_responses, load_records, scene_fidelity,
    structural_token_accuracy,
)
from .inference import (
    GenerationConfig, interleaved_generate, read_bundle, write_bundle,
)
from .masks import build_causal_mm_mask, write_pgm
from .model import ModelConfig, new_model
from .toyworld import (
    CATEGORIES, WorldCache, load_raw, read_manifest, render_scene, save_raw,
    synth_dataset, write_manifest,
)
from .trainer import (
    DataPools, StagePlan, STAGE_DPCW, STAGE_JOINT, STAGE_PLANNER,
    STAGE_VISUALIZER, load_checkpoint, run_pipeline, save_checkpoint,
)


class BadConfig(ValueError):
    pass


# =============================================================================
# Run configuration
# =============================================================================

@dataclass
class RunConfig:
    # model
    n_layers: int = 4
    d_model: int = 96
    n_heads: int = 2
    head_width: int = 48
    ffn_mult: int = 4
    vit_seed: int = 11
    vae_seed: int = 13
    # training
    vis_steps: int = 3000
    planner_steps: int = 2000
    dpcw_steps: int = 800
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
    # generation
    sampler_steps: int = 10
    max_text_tokens: int = 96
    max_images: int = 4
    temperature: float = 0.0
    mask_mode: str = "dpcw"
    # data synthesis
    n_t2i: int = 2000
    n_si2i: int = 2000
    n_mi2i: int = 2000
    n_understanding: int = 1000
    n_interleaved: int = 3000
    data_seed: int = 1

    def set_kv(self, key: str, raw: str) -> None:
        types = {f.name: f.type for f in dataclasses.fields(self)}
        if key not in types:
            raise BadConfig(f"unknown config key {key!r}")
        current = getattr(self, key)
        try:
            if isinstance(current, bool):
                value = raw.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw
        except ValueError as err:
            raise BadConfig(f"bad value for {key!r}: {raw!r}") from err
        setattr(self, key, value)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(
                Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise BadConfig(f"{path}:{lineno}: expected key=value")
            cfg.set_kv(key.strip(), value.strip())
        return cfg

    def to_lines(self) -> str:
        return "".join(
            f"{f.name}={getattr(self, f.name)}\n"
            for f in dataclasses.fields(self)
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers, d_model=self.d_model,
            n_heads=self.n_heads, head_width=self.head_width,
            vocab_size=len(VOCAB), ffn_mult=self.ffn_mult,
            vit_seed=self.vit_seed, vae_seed=self.vae_seed,
        )

    def generation_config(self, seed: int | None = None,
                          mask_mode: str | None = None) -> GenerationConfig:
        return GenerationConfig(
            max_images=self.max_images,
            max_text_tokens=self.max_text_tokens,
            sampler_steps=self.sampler_steps,
            temperature=self.temperature,
            mask_mode=mask_mode or self.mask_mode,
            window_w=self.window_w,
            seed=self.seed if seed is None else seed,
        )

    def data_counts(self) -> dict[str, int]:
        return {
            "T2I": self.n_t2i, "SI2I": self.n_si2i, "MI2I": self.n_mi2i,
            "UNDERSTANDING": self.n_understanding,
            "INTERLEAVED": self.n_interleaved,
        }


# =============================================================================
# Argument parsing
# =============================================================================

class _UsageError(Exception):
    pass


class HelpfulParser(argparse.ArgumentParser):
    """Usage errors print the relevant help and map to exit code 1."""

    def error(self, message):
        print(f"error: {message}\n", file=sys.stderr)
        self.print_help(sys.stderr)
        raise _UsageError(message)


def build_parser() -> HelpfulParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--config", default=None,
                        help="key=value config file")
    common.add_argument("--out", default=None,
                        help="output directory (default $WEAVER_OUT or ./out)")
    common.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config entry")

    parser = HelpfulParser(
        prog="planviz",
        description="Planner/visualizer interleaved text-image model tooling.",
    )
    sub = parser.add_subparsers(dest="command", parser_class=HelpfulParser)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    p = add("synth", "write synthetic datasets")
    p.add_argument("--category", required=True,
                   choices=[c.lower() for c in CATEGORIES] + ["mixed"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--no-images", action="store_true",
                   help="skip writing reference/target renders")

    p = add("train", "run training stages")
    p.add_argument("--stage", required=True,
                   choices=["visualizer", "planner", "dpcw", "all",
                            "joint-baseline"])
    p.add_argument("--data", required=True, help="dataset root (synth output)")
    p.add_argument("--ckpt", default=None,
                   help="checkpoint to continue from (default: fresh init)")

    p = add("generate", "run interleaved generation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", default=None,
                   help="prompt text (space-joined token literals)")
    p.add_argument("--image", action="append", default=[],
                   help="reference image .raw, one per prompt <BOI>")
    p.add_argument("--fixtures", default=None,
                   help="generate for every sample in a dataset root")
    p.add_argument("--mask-mode", choices=["base", "dpcw"], default=None)
    p.add_argument("--dump-masks", action="store_true",
                   help="write a PGM of each final attention mask")

    p = add("eval", "score generations against fixtures")
    p.add_argument("--pred", required=True)
    p.add_argument("--fixtures", required=True)

    p = add("judge-prompts", "emit rubric files for a judge")
    p.add_argument("--pred", required=True)

    p = add("report", "aggregate judge scores and accuracies")
    p.add_argument("--scores", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--fixtures", default=None,
                   help="include oracle fidelity (needs target specs)")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise BadConfig(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set_kv(key.strip(), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    root = args.out or os.environ.get("WEAVER_OUT") or "out"
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.to_lines(), encoding="utf-8")


# =============================================================================
# Subcommands
# =============================================================================

def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    _echo_config(cfg, out)
    seed = cfg.seed if args.seed is not None else cfg.data_seed
    wanted = CATEGORIES if args.category == "mixed" \
        else (args.category.upper(),)
    for cat in wanted:
        samples = synth_dataset(cat, args.n, seed)
        for i, s in enumerate(samples):
            s.category = EVAL_CATEGORIES[i % len(EVAL_CATEGORIES)]
        cat_dir = out / cat.lower()
        cat_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(cat_dir / "manifest.jsonl", samples)
        records = []
        for s in samples:
            records.append(("prompt", s.prompt))
            records.append(("response", s.response))
        write_sequence_fixture(cat_dir / "sequences.tsv", records)
        if not args.no_images:
            img_dir = cat_dir / "images"
            img_dir.mkdir(exist_ok=True)
            for s in samples:
                for j, spec in enumerate(s.ref_specs):
                    save_raw(img_dir / f"{s.sample_id}_ref{j}.raw",
                             render_scene(spec))
                for j, spec in enumerate(s.target_specs):
                    save_raw(img_dir / f"{s.sample_id}_tgt{j}.raw",
                             render_scene(spec))
        print(f"synth: {cat.lower()}: {len(samples)} samples -> {cat_dir}")
    return 0


_PLAN_KNOBS = ("batch_size", "lr_start", "lr_end", "weight_decay", "beta1",
               "beta2", "eval_every", "eval_batch_size", "window_w")


def _stage_plan(cfg: RunConfig, stage: str, steps: int) -> StagePlan:
    knobs = {k: getattr(cfg, k) for k in _PLAN_KNOBS}
    return StagePlan(stage=stage, steps=steps, seed=cfg.seed, **knobs)


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    _echo_config(cfg, out)
    pools = DataPools.from_manifests(args.data)
    world = WorldCache(cfg.d_model, cfg.vit_seed, cfg.vae_seed)
    mc = cfg.model_config()
    if args.ckpt:
        state = load_checkpoint(args.ckpt, expected_cfg=mc).state
    else:
        state = new_model(mc, cfg.seed)

    stage_steps = {
        STAGE_VISUALIZER: cfg.vis_steps,
        STAGE_PLANNER: cfg.planner_steps,
        STAGE_DPCW: cfg.dpcw_steps,
        STAGE_JOINT: cfg.vis_steps,
    }
    if args.stage == "all":
        order = [STAGE_VISUALIZER, STAGE_PLANNER, STAGE_DPCW]
    elif args.stage == "joint-baseline":
        order = [STAGE_JOINT]
    else:
        order = [args.stage]
    plans = [_stage_plan(cfg, stage, stage_steps[stage]) for stage in order]
    run_pipeline(state, plans, pools, world, out_dir=out, log=print)
    save_checkpoint(
        state, out / "final.ckpt",
        step=sum(p.steps for p in plans),
        extra={"stages": "+".join(order), "seed": cfg.seed},
    )
    print(f"train: wrote {out / 'final.ckpt'}")
    return 0


def _gen_seed(base: int, index: int) -> int:
    return (base * 1_000_003 + index) & 0x7FFFFFFF


def cmd_generate(cfg: RunConfig, args) -> int:
    if (args.prompt is None) == (args.fixtures is None):
        raise BadConfig("generate needs exactly one of --prompt / --fixtures")
    out = _out_dir(args)
    _echo_config(cfg, out)
    state = load_checkpoint(args.ckpt, expected_cfg=cfg.model_config()).state

    if args.prompt is not None:
        gcfg = cfg.generation_config(mask_mode=args.mask_mode)
        prompt_ids = tokenize(args.prompt)
        refs = [load_raw(p) for p in args.image]
        result = interleaved_generate(state, prompt_ids, refs, gcfg)
        write_bundle(result, out, config=gcfg)
        if args.dump_masks:
            write_pgm(build_causal_mm_mask(result.sequence.segments),
                      out / "mask_base.pgm")
        print(f"generate: {result.stop_reason}, {len(result.images)} images "
              f"-> {out}")
        return 0

    root = Path(args.fixtures)
    manifests = sorted(root.glob("*/manifest.jsonl"))
    if not manifests:
        raise BadConfig(f"no manifests under {root}")
    n_done = 0
    for manifest in manifests:
        for idx, s in enumerate(read_manifest(manifest)):
            gcfg = cfg.generation_config(
                seed=_gen_seed(cfg.seed, n_done), mask_mode=args.mask_mode)
            refs = [render_scene(spec) for spec in s.ref_specs]
            result = interleaved_generate(state, tokenize(s.prompt), refs, gcfg)
            bundle = out / s.sample_id
            write_bundle(result, bundle, config=gcfg, extra_meta={
                "task": s.task,
                "category": s.category,
                "sample_id": s.sample_id,
                "required_images": s.required_images,
                "n_ref_images": len(s.ref_specs),
            })
            if args.dump_masks:
                write_pgm(build_causal_mm_mask(result.sequence.segments),
                          bundle / "mask_base.pgm")
            n_done += 1
    print(f"generate: {n_done} bundles -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    _echo_config(cfg, out)
    records = load_records(args.pred, args.fixtures)
    if not records:
        raise BadConfig(
            f"no (bundle, fixture) pairs joined under {args.pred}")
    counted = [r for r in records if r.required_images is not None]
    with_targets = [r for r in records if r.target_specs]
    fidelity = scene_fidelity(with_targets) if with_targets else None
    payload = {
        "n_records": len(records),
        "structural_accuracy": structural_token_accuracy(records),
        "image_count_accuracy":
            accuracy_image_count(counted) if counted else None,
        "n_count_constrained": len(counted),
        "fidelity": None if fidelity is None else {
            "exact": fidelity.exact,
            "per_attribute": fidelity.per_attribute,
            "n_records": fidelity.n_records,
            "flagged": fidelity.flagged,
        },
        "by_task": {},
    }
    for task in sorted({r.task for r in records}):
        group = [r for r in records if r.task == task]
        payload["by_task"][task] = {
            "n": len(group),
            "structural_accuracy": structural_token_accuracy(group),
        }
    (out / "eval.json").write_text(
        json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
    print(f"eval: n={payload['n_records']} "
          f"structural={payload['structural_accuracy']:.4f}")
    if payload["image_count_accuracy"] is not None:
        print(f"eval: image_count={payload['image_count_accuracy']:.4f} "
              f"over {len(counted)}")
    if fidelity is not None:
        print(f"eval: fidelity_exact={fidelity.exact:.4f} "
              f"({fidelity.n_records} records, {len(fidelity.flagged)} flagged)")
    print(f"eval: wrote {out / 'eval.json'}")
    return 0


def _records_from_pred(pred_dir) -> list[EvalRecord]:
    """Rebuild judge-facing records from bundle metadata alone (no targets)."""
    records = []
    bundles = sorted(
        p.parent for p in Path(pred_dir).glob("*/meta.json"))
    for i, bundle in enumerate(bundles):
        meta = read_bundle(bundle)
        required = meta.get("required_images")
        task = meta.get("task") or "T2I"
        if task != "INTERLEAVED":
            required = None
        records.append(EvalRecord(
            prompt_id=meta.get("sample_id") or bundle.name,
            category=meta.get("category")
            or EVAL_CATEGORIES[i % len(EVAL_CATEGORIES)],
            task=task,
            image_count=int(meta["image_count"]),
            required_images=required,
            images=meta["images"],
            prompt_text=meta.get("prompt", ""),
            transcript=meta.get("response", ""),
            dense_prompts=list(meta.get("dense_prompts", [])),
            grammar_valid=bool(meta.get("grammar_valid", True)),
            n_ref_images=int(meta.get("n_ref_images", 0)),
        ))
    return records


def cmd_judge_prompts(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    records = _records_from_pred(args.pred)
    if not records:
        raise BadConfig(f"no bundles under {args.pred}")
    paths = emit_judge_prompts(records, out)
    print(f"judge-prompts: {len(paths)} files -> {out}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    scored = ingest_judge_responses(args.scores)
    if args.fixtures:
        records = load_records(args.pred, args.fixtures)
    else:
        records = _records_from_pred(args.pred)
    report = aggregate_report(records, scored)
    report.save(out)
    print(report.to_text(), end="")
    print(f"report: wrote {out / 'report.csv'}")
    return 0


# =============================================================================
# Entry
# =============================================================================

_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "judge-prompts": cmd_judge_prompts,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required")
    except _UsageError:
        return 1
    try:
        cfg = _resolve_config(args)
        return _COMMANDS[args.command](cfg, args)
    except BadConfig as exc:  # bad flags/config values are usage errors
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 2 with a message
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))

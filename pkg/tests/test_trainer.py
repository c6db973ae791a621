"""Unit tests for data materialization, stage training, and checkpoints."""

import math

import numpy as np
import pytest
import torch

from planviz.core import (
    BOI, EOS, IMAGINE_CLOSE, IMAGINE_OPEN, LayoutError, SegKind, tokenize,
)
from planviz.model import ModelConfig, new_model
from planviz.toyworld import CATEGORIES, WorldCache, synth_dataset, synth_sample
from planviz.trainer import (
    CKPT_MAGIC, ConfigMismatch, DataMissing, DataPools, FNV_OFFSET,
    HashMismatch, IoError, PLANNER_MIX_P, STAGE_DPCW, STAGE_JOINT,
    STAGE_PLANNER, STAGE_VISUALIZER, StagePlan, VIS_MIX, build_sequence,
    default_plans, expert_hash, flow_row, fnv1a64, load_checkpoint,
    make_flow_batch, make_planner_batch, masked_layout, optimizer_moments,
    planner_row, run_pipeline, run_stage, sample_planner_categories,
    save_checkpoint,
)

TINY = ModelConfig(n_layers=2, d_model=24, n_heads=2, head_width=12,
                   ffn_mult=2)


@pytest.fixture(scope="module")
def world():
    return WorldCache(TINY.d_model, TINY.vit_seed, TINY.vae_seed)


@pytest.fixture(scope="module")
def pools():
    return DataPools.from_synth(
        {c: 12 for c in CATEGORIES}, seed=5)


class TestFnv:
    def test_known_vectors(self):
        assert fnv1a64(b"") == FNV_OFFSET == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_chaining_equals_concatenation(self):
        assert fnv1a64(b"bar", fnv1a64(b"foo")) == fnv1a64(b"foobar")


class TestExpertHash:
    def test_stable_and_sensitive(self):
        state = new_model(TINY, seed=0)
        h1 = expert_hash(state, "planner")
        assert expert_hash(state, "planner") == h1
        with torch.no_grad():
            state.planner.lm_head.weight[0, 0] += 1.0
        assert expert_hash(state, "planner") != h1

    def test_experts_hash_independently(self):
        state = new_model(TINY, seed=0)
        hv = expert_hash(state, "visualizer")
        with torch.no_grad():
            state.planner.lm_head.weight[0, 0] += 1.0
        assert expert_hash(state, "visualizer") == hv


class TestBuildSequence:
    def test_planner_mode_is_textual_proxy(self):
        s = synth_sample("SI2I", 0, seed=1)
        mat = build_sequence(s, "planner")
        kinds = [seg.kind for seg in mat.segments]
        # one ViT block for the prompt reference, no VAE blocks anywhere
        assert kinds.count(SegKind.VIT_IMG) == 1
        assert SegKind.VAE_CLEAN not in kinds
        assert SegKind.VAE_NOISY not in kinds
        # the full response text (including dense words) is materialized
        resp = [int(t) for t, k in zip(mat.ids, mat.kinds)
                if k in (int(SegKind.TEXT), int(SegKind.DENSE_PROMPT))]
        assert resp[-1] == EOS
        assert mat.dense_seg is not None
        assert mat.dense_seg.kind is SegKind.DENSE_PROMPT

    def test_planner_mode_marks_imagine_spans_as_dense(self):
        s = synth_sample("T2I", 0, seed=1)
        mat = build_sequence(s, "planner")
        dense = [seg for seg in mat.segments
                 if seg.kind is SegKind.DENSE_PROMPT]
        assert len(dense) == 1
        # markers stay TEXT: positions adjacent to the dense span
        open_pos, close_pos = dense[0].start - 1, dense[0].end
        assert mat.ids[open_pos] == IMAGINE_OPEN
        assert mat.ids[close_pos] == IMAGINE_CLOSE
        assert mat.kinds[open_pos] == int(SegKind.TEXT)
        assert mat.kinds[close_pos] == int(SegKind.TEXT)

    def test_flow_mode_truncates_at_first_boi(self):
        s = synth_sample("INTERLEAVED", 3, seed=1)
        mat = build_sequence(s, "flow")
        assert mat.noisy_seg is not None
        assert mat.segments[-1] is mat.noisy_seg
        assert mat.noisy_seg.length == 64
        # exactly one BOI survives in the materialized text
        text_ids = [int(t) for t in mat.ids if t >= 0]
        assert text_ids.count(BOI) == sum(
            1 for t in tokenize(s.prompt) if t == BOI) + 1
        assert EOS not in text_ids

    def test_flow_mode_pairs_clean_with_vit_for_refs(self):
        s = synth_sample("MI2I", 0, seed=1)
        mat = build_sequence(s, "flow")
        assert len(mat.vit_segs) == 2 and len(mat.clean_segs) == 2
        for vit, clean in zip(mat.vit_segs, mat.clean_segs):
            assert clean.start == vit.end
            assert clean.ordinal == vit.ordinal
        assert mat.noisy_seg.ordinal == 2
        assert mat.ref_ordinals == (0, 1)

    def test_flow_mode_rejects_imageless_response(self):
        s = synth_sample("UNDERSTANDING", 0, seed=1)
        with pytest.raises(LayoutError):
            build_sequence(s, "flow")

    def test_prompt_len_splits_prompt_from_response(self):
        s = synth_sample("T2I", 5, seed=1)
        mat = build_sequence(s, "planner")
        assert mat.prompt_len == len(tokenize(s.prompt))
        s2 = synth_sample("SI2I", 5, seed=1)
        mat2 = build_sequence(s2, "planner")
        # prompt tokens + one 64-token ViT block
        assert mat2.prompt_len == len(tokenize(s2.prompt)) + 64

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            build_sequence(synth_sample("T2I", 0, seed=1), "diffusion")


class TestMaskedLayout:
    def test_cache_returns_same_arrays(self):
        s = synth_sample("T2I", 1, seed=2)
        mat = build_sequence(s, "flow")
        a = masked_layout(mat.segments, "base")
        b = masked_layout(mat.segments, "base")
        assert a[0] is b[0] and a[1] is b[1]

    def test_modes_differ(self):
        s = synth_sample("SI2I", 1, seed=2)
        mat = build_sequence(s, "flow")
        base, _ = masked_layout(mat.segments, "base")
        dpcw, _ = masked_layout(mat.segments, "dpcw", window_w=0,
                                dense_seg=mat.dense_seg,
                                ref_ordinals=mat.ref_ordinals)
        assert (base & ~dpcw).any()

    def test_dpcw_needs_dense(self):
        s = synth_sample("T2I", 1, seed=2)
        mat = build_sequence(s, "flow")
        with pytest.raises(ValueError):
            masked_layout(mat.segments, "dpcw", window_w=4)


class TestRows:
    def test_planner_row_targets_response_text_only(self, world):
        s = synth_sample("SI2I", 2, seed=3)
        row = planner_row(s, world)
        mat = build_sequence(s, "planner")
        assert row.loss_mask[:mat.prompt_len].sum() == 0
        resp_text = [
            p for p in range(mat.prompt_len, len(mat.ids))
            if row.kinds[p] in (int(SegKind.TEXT), int(SegKind.DENSE_PROMPT))
        ]
        assert row.loss_mask.sum() == len(resp_text)
        assert row.latents is None and row.t is None

    def test_planner_row_fills_ref_vit_tokens(self, world):
        s = synth_sample("SI2I", 2, seed=3)
        row = planner_row(s, world)
        mat = build_sequence(s, "planner")
        vit_seg = mat.vit_segs[0]
        idx = world.index(s.ref_specs[0])
        np.testing.assert_array_equal(
            row.vit[vit_seg.start:vit_seg.end], world.vit_tokens[idx])
        outside = np.ones(len(mat.ids), dtype=bool)
        outside[vit_seg.start:vit_seg.end] = False
        assert not row.vit[outside].any()

    def test_flow_row_interpolates_latents(self, world):
        s = synth_sample("T2I", 4, seed=3)
        rng = np.random.default_rng(0)
        row = flow_row(s, world, "base", 64, rng)
        mat = build_sequence(s, "flow")
        seg = mat.noisy_seg
        x1 = world.latent_patches[world.index(s.target_specs[0])]
        # x_t = x1 + t * v_star  (since v_star = x0 - x1)
        np.testing.assert_allclose(
            row.latents[seg.start:seg.end],
            x1 + row.t * row.v_star[seg.start:seg.end],
            atol=1e-5,
        )
        assert 0.0 <= row.t <= 1.0
        assert not row.v_star[:seg.start].any()

    def test_flow_row_clean_blocks_hold_ref_latents(self, world):
        s = synth_sample("SI2I", 4, seed=3)
        rng = np.random.default_rng(0)
        row = flow_row(s, world, "base", 64, rng)
        mat = build_sequence(s, "flow")
        clean = mat.clean_segs[0]
        idx = world.index(s.ref_specs[0])
        np.testing.assert_array_equal(
            row.latents[clean.start:clean.end], world.latent_patches[idx])


class TestMixes:
    def test_planner_mix_weights(self):
        assert PLANNER_MIX_P["UNDERSTANDING"] == pytest.approx(1 / 6)
        for cat in ("T2I", "SI2I", "MI2I", "INTERLEAVED"):
            assert PLANNER_MIX_P[cat] == pytest.approx(5 / 24)
        assert sum(PLANNER_MIX_P.values()) == pytest.approx(1.0)

    def test_sampled_mix_within_two_percent_at_6000(self):
        rng = np.random.default_rng(123)
        draws = sample_planner_categories(rng, 6000)
        for cat in CATEGORIES:
            frac = draws.count(cat) / 6000
            assert abs(frac - PLANNER_MIX_P[cat]) <= 0.02, (cat, frac)

    def test_visualizer_round_robin_order(self, world, pools, monkeypatch):
        import planviz.trainer as trainer_mod
        seen = []
        real = make_flow_batch

        def spy(pools_, world_, rng, batch_size, category, mask_mode,
                window_w, dtype=torch.float32):
            seen.append(category)
            return real(pools_, world_, rng, batch_size, category,
                        mask_mode, window_w, dtype)

        monkeypatch.setattr(trainer_mod, "make_flow_batch", spy)
        state = new_model(TINY, seed=0)
        plan = StagePlan(stage=STAGE_VISUALIZER, steps=6, batch_size=2,
                         eval_every=100, eval_batch_size=2, seed=0)
        run_stage(state, plan, pools, world)
        assert seen == ["T2I", "SI2I", "MI2I", "T2I", "SI2I", "MI2I"]


class TestAdamWReference:
    def test_step_matches_hand_derivation(self):
        """Three optimizer steps against the written update rule, <= 1e-10."""
        lr, wd, b1, b2, eps = 1e-3, 0.01, 0.9, 0.95, 1e-8
        p0 = torch.tensor([0.7, -1.3, 2.1], dtype=torch.float64)
        grads = [torch.tensor(g, dtype=torch.float64)
                 for g in ([0.3, -0.2, 0.5], [-0.1, 0.4, 0.2],
                           [0.25, 0.1, -0.3])]
        p = p0.clone().requires_grad_(True)
        opt = torch.optim.AdamW([p], lr=lr, betas=(b1, b2),
                                weight_decay=wd, eps=eps)
        for g in grads:
            opt.zero_grad()
            p.grad = g.clone()
            opt.step()

        q = p0.clone()
        m = torch.zeros(3, dtype=torch.float64)
        v = torch.zeros(3, dtype=torch.float64)
        for t, g in enumerate(grads, start=1):
            q = q * (1.0 - lr * wd)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            q = q - lr * m_hat / (v_hat.sqrt() + eps)
        assert (p.detach() - q).abs().max().item() <= 1e-10


class TestStages:
    def test_visualizer_stage_freezes_planner(self, world, pools):
        state = new_model(TINY, seed=1)
        plan = StagePlan(stage=STAGE_VISUALIZER, steps=2, batch_size=2,
                         eval_every=10, eval_batch_size=2, seed=1)
        m = run_stage(state, plan, pools, world)
        assert m.pre_hashes["planner"] == m.post_hashes["planner"]
        assert m.pre_hashes["visualizer"] != m.post_hashes["visualizer"]
        assert all(p.requires_grad for p in state.parameters())

    def test_planner_stage_freezes_visualizer(self, world, pools):
        state = new_model(TINY, seed=1)
        plan = StagePlan(stage=STAGE_PLANNER, steps=2, batch_size=2,
                         eval_every=10, eval_batch_size=2, seed=1)
        m = run_stage(state, plan, pools, world)
        assert m.pre_hashes["visualizer"] == m.post_hashes["visualizer"]
        assert m.pre_hashes["planner"] != m.post_hashes["planner"]

    def test_dpcw_stage_trains_visualizer_only(self, world, pools):
        state = new_model(TINY, seed=2)
        plan = StagePlan(stage=STAGE_DPCW, steps=2, batch_size=2,
                         eval_every=10, eval_batch_size=2, seed=2)
        m = run_stage(state, plan, pools, world)
        assert m.pre_hashes["planner"] == m.post_hashes["planner"]
        assert m.pre_hashes["visualizer"] != m.post_hashes["visualizer"]

    def test_joint_stage_moves_both(self, world, pools):
        state = new_model(TINY, seed=3)
        plan = StagePlan(stage=STAGE_JOINT, steps=2, batch_size=2,
                         eval_every=10, eval_batch_size=2, seed=3)
        m = run_stage(state, plan, pools, world)
        assert m.pre_hashes["planner"] != m.post_hashes["planner"]
        assert m.pre_hashes["visualizer"] != m.post_hashes["visualizer"]

    def test_same_seed_reproduces_stage_exactly(self, world, pools):
        results = []
        for _ in range(2):
            state = new_model(TINY, seed=4)
            plan = StagePlan(stage=STAGE_VISUALIZER, steps=3, batch_size=2,
                             eval_every=2, eval_batch_size=2, seed=9)
            m = run_stage(state, plan, pools, world)
            results.append((m.train_losses, m.eval_losses,
                            m.post_hashes["visualizer"]))
        assert results[0] == results[1]

    def test_eval_recorded_at_start_and_end(self, world, pools):
        state = new_model(TINY, seed=5)
        plan = StagePlan(stage=STAGE_VISUALIZER, steps=5, batch_size=2,
                         eval_every=2, eval_batch_size=2, seed=5)
        m = run_stage(state, plan, pools, world)
        assert m.eval_steps[0] == 0
        assert m.eval_steps[-1] == 5
        assert 2 in m.eval_steps and 4 in m.eval_steps
        assert len(m.eval_losses) == len(m.eval_steps)

    def test_missing_data_raises(self, world):
        empty = DataPools(pools={c: [] for c in CATEGORIES})
        state = new_model(TINY, seed=0)
        plan = StagePlan(stage=STAGE_PLANNER, steps=1, batch_size=2)
        with pytest.raises(DataMissing):
            run_stage(state, plan, empty, world)

    def test_unknown_stage_rejected(self):
        with pytest.raises(ValueError):
            StagePlan(stage="distill", steps=1)

    def test_default_plans_order(self):
        plans = default_plans(7)
        assert [p.stage for p in plans] == \
            [STAGE_VISUALIZER, STAGE_PLANNER, STAGE_DPCW]
        assert [p.steps for p in plans] == [3000, 2000, 800]
        assert all(p.seed == 7 for p in plans)


class TestDataPools:
    def test_from_synth_counts(self, pools):
        for cat in CATEGORIES:
            assert len(pools.pools[cat]) == 12

    def test_require_names_missing_categories(self):
        pools = DataPools(pools={c: ([] if c == "T2I" else [object()])
                                 for c in CATEGORIES})
        with pytest.raises(DataMissing) as err:
            pools.require(STAGE_VISUALIZER)
        assert "T2I" in str(err.value)

    def test_from_manifests_round_trip(self, tmp_path):
        from planviz.toyworld import write_manifest
        for cat in CATEGORIES:
            d = tmp_path / cat.lower()
            d.mkdir()
            write_manifest(d / "manifest.jsonl", synth_dataset(cat, 3, seed=1))
        pools = DataPools.from_manifests(tmp_path)
        for cat in CATEGORIES:
            assert len(pools.pools[cat]) == 3
            assert pools.pools[cat][0].task == cat


class TestCheckpoints:
    def test_round_trip_restores_parameters(self, tmp_path):
        state = new_model(TINY, seed=6)
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path, step=17, extra={"stage": "visualizer"})
        loaded = load_checkpoint(path)
        assert loaded.step == 17
        assert loaded.config["stage"] == "visualizer"
        for (na, pa), (nb, pb) in zip(state.named_parameters(),
                                      loaded.state.named_parameters()):
            assert na == nb
            torch.testing.assert_close(pa, pb, rtol=0, atol=0)

    def test_resave_is_byte_identical(self, tmp_path):
        state = new_model(TINY, seed=6)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(state, p1, step=3)
        save_checkpoint(load_checkpoint(p1).state, p2, step=3)
        assert p1.read_bytes() == p2.read_bytes()

    def test_moments_round_trip(self, tmp_path):
        state = new_model(TINY, seed=6)
        named = list(state.named_parameters())
        opt = torch.optim.AdamW([p for _, p in named], lr=1e-3)
        loss = sum((p * p).sum() for p in state.parameters())
        loss.backward()
        opt.step()
        moments = optimizer_moments(opt, named)
        assert any(k.startswith("opt.exp_avg.") for k in moments)
        path = tmp_path / "m.ckpt"
        save_checkpoint(state, path, moments=moments)
        loaded = load_checkpoint(path)
        assert set(loaded.moments) == set(moments)
        for k in moments:
            np.testing.assert_array_equal(loaded.moments[k], moments[k])

    def test_truncated_file_raises(self, tmp_path):
        state = new_model(TINY, seed=6)
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path)
        data = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(data[:len(data) // 2])
        with pytest.raises(IoError):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_bad_magic_raises(self, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"XXXX" + b"\0" * 100)
        with pytest.raises(IoError):
            load_checkpoint(tmp_path / "junk.ckpt")

    def test_config_mismatch_raises(self, tmp_path):
        state = new_model(TINY, seed=6)
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path)
        other = ModelConfig(n_layers=2, d_model=48, n_heads=2, head_width=24,
                            ffn_mult=2)
        with pytest.raises(ConfigMismatch):
            load_checkpoint(path, expected_cfg=other)

    def test_corrupt_payload_raises_hash_mismatch(self, tmp_path):
        state = new_model(TINY, seed=6)
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path)
        data = bytearray(path.read_bytes())
        # flip a bit deep inside the parameter payload region
        data[len(data) // 2] ^= 0x40
        (tmp_path / "bad.ckpt").write_bytes(bytes(data))
        with pytest.raises((HashMismatch, ConfigMismatch, IoError)):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_magic_constant(self):
        assert CKPT_MAGIC == b"WWV1"


class TestPipeline:
    def test_writes_checkpoints_and_metrics(self, tmp_path, world, pools):
        state = new_model(TINY, seed=8)
        plans = [
            StagePlan(stage=STAGE_VISUALIZER, steps=2, batch_size=2,
                      eval_every=10, eval_batch_size=2, seed=8),
            StagePlan(stage=STAGE_PLANNER, steps=2, batch_size=2,
                      eval_every=10, eval_batch_size=2, seed=8),
        ]
        metrics = run_pipeline(state, plans, pools, world, out_dir=tmp_path)
        assert len(metrics) == 2
        assert (tmp_path / "ckpt_visualizer.bin").exists()
        assert (tmp_path / "ckpt_planner.bin").exists()
        assert (tmp_path / "metrics_visualizer.json").exists()
        assert (tmp_path / "metrics_planner.json").exists()
        loaded = load_checkpoint(tmp_path / "ckpt_planner.bin")
        assert loaded.config["stage"] == STAGE_PLANNER

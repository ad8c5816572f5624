"""Toy DiT tests: passthrough, parity routing, causality, exports, wrappers."""
from __future__ import annotations

import numpy as np
import pytest

import lpm.toydit as td
from lpm.denoise import TimestepSchedule
from lpm.errors import ConfigError, ScheduleError, ShapeError
from lpm.kvcache import CachePair, RetentionPolicy, current_positions
from lpm.latcore import Tensor2D
from lpm.toydit import (
    CausalToyModel,
    CondBundle,
    ModelConfig,
    backbone_predict,
    clone_weights,
    load_model,
    random_weights,
    refiner_predict,
    save_model,
    silence_cond,
    zeros_weights,
)

from conftest import make_cond, make_ref, rand_t2d


def _chunks(rng, cfg, n):
    return [rng.standard_normal((cfg.tokens_per_chunk, cfg.d_model)).astype(np.float32)
            for _ in range(n)]


class TestModelConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_layers=3)
        with pytest.raises(ConfigError):
            ModelConfig(n_layers=0)
        with pytest.raises(ConfigError):
            ModelConfig(d_model=30, n_heads=4)
        with pytest.raises(ConfigError):
            ModelConfig(d_model=12, n_heads=4)  # head_dim 3 is odd
        with pytest.raises(ConfigError):
            ModelConfig(tokens_per_chunk=0)

    def test_round_trip(self):
        cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, tokens_per_chunk=4,
                          d_cond=8, d_ffn=32, rope_axes=(4, 2, 2))
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"n_layers": 2, "flux_capacitor": 1})

    def test_block_parity_validated(self, small_cfg):
        w = random_weights(small_cfg, seed=0)
        b0 = w.blocks[0]
        assert b0.speaks and b0.w_k_spk is not None and b0.w_k_lis is None
        bad = clone_weights(w)
        bad.blocks[0].w_k_lis = bad.blocks[1].w_k_lis
        with pytest.raises(ConfigError):
            CausalToyModel(small_cfg, bad)


class TestForwardJoint:
    def test_zero_weights_passthrough(self, small_cfg):
        model = CausalToyModel(small_cfg, zeros_weights(small_cfg))
        rng = np.random.default_rng(0)
        chunks = _chunks(rng, small_cfg, 3)
        conds = [make_cond(small_cfg, rng, ref=make_ref(small_cfg, np.random.default_rng(9)))
                 for _ in range(3)]
        ref = conds[0].ref_tokens
        conds = [CondBundle(c.text_tokens, c.speak_frames, c.listen_frames, ref)
                 for c in conds]
        res = model.forward_joint(chunks, [1.0, 1.0, 0.5], conds)
        for out, x in zip(res.out_chunks, chunks):
            np.testing.assert_array_equal(out, x)

    def test_timestep_changes_output(self, small_model, small_cfg):
        rng = np.random.default_rng(1)
        chunks = _chunks(rng, small_cfg, 1)
        cond = make_cond(small_cfg, rng)
        a = small_model.forward_joint(chunks, [1.0], [cond]).out_chunks[0]
        b = small_model.forward_joint(chunks, [0.5], [cond]).out_chunks[0]
        assert np.abs(a - b).max() > 1e-6

    def test_chunk_causality_probe(self, small_model, small_cfg):
        rng = np.random.default_rng(2)
        n = 4
        chunks = _chunks(rng, small_cfg, n)
        ref = make_ref(small_cfg, rng)
        conds = [make_cond(small_cfg, rng, ref=ref) for _ in range(n)]
        t_vec = [1.0, 1.0, 0.5, 0.5]
        base = small_model.forward_joint(chunks, t_vec, conds)
        for future in range(1, n):
            mod = [c.copy() for c in chunks]
            mod[future] = mod[future] + rng.standard_normal(mod[future].shape).astype(np.float32)
            got = small_model.forward_joint(mod, t_vec, conds)
            for past in range(future):
                diff = np.abs(got.out_chunks[past] - base.out_chunks[past]).max()
                assert diff <= 1e-6, f"chunk {past} saw chunk {future}: {diff}"

    def test_validation_errors(self, small_model, small_cfg):
        rng = np.random.default_rng(3)
        chunks = _chunks(rng, small_cfg, 2)
        ref = make_ref(small_cfg, rng)
        conds = [make_cond(small_cfg, rng, ref=ref) for _ in range(2)]
        with pytest.raises(ShapeError):
            small_model.forward_joint(chunks, [1.0], conds)
        with pytest.raises(ShapeError):
            small_model.forward_joint([], [], [])
        other = [make_cond(small_cfg, rng), conds[1]]
        with pytest.raises(ConfigError, match="identical"):
            small_model.forward_joint(chunks, [1.0, 1.0], other)
        with pytest.raises(ShapeError):
            small_model.forward_joint(
                [chunks[0][:, :-1], chunks[1]], [1.0, 1.0], conds
            )


class TestParityRouting:
    def test_cross_attention_blind_to_other_stream(self, small_cfg):
        rng = np.random.default_rng(4)
        for seed in range(5):
            model = CausalToyModel(small_cfg, random_weights(small_cfg, seed=seed))
            x = rng.standard_normal((small_cfg.tokens_per_chunk, small_cfg.d_model)).astype(np.float32)
            cond = make_cond(small_cfg, rng)
            bump = rand_t2d(rng, cond.listen_frames.rows, small_cfg.d_cond)
            perturbed_listen = CondBundle(
                cond.text_tokens, cond.speak_frames, bump, cond.ref_tokens
            )
            perturbed_speak = CondBundle(
                cond.text_tokens, bump, cond.listen_frames, cond.ref_tokens
            )
            for b in model.weights.blocks:
                base = model._cross_attention(b, x, cond)
                if b.speaks:  # even layers read speak only
                    same = model._cross_attention(b, x, perturbed_listen)
                    diff = model._cross_attention(b, x, perturbed_speak)
                else:
                    same = model._cross_attention(b, x, perturbed_speak)
                    diff = model._cross_attention(b, x, perturbed_listen)
                np.testing.assert_array_equal(base, same)
                assert np.abs(base - diff).max() > 0

    def test_mute_equals_zero_frames(self, small_model, small_cfg):
        rng = np.random.default_rng(5)
        chunks = _chunks(rng, small_cfg, 1)
        cond = make_cond(small_cfg, rng)
        zeros = Tensor2D(np.zeros((cond.speak_frames.rows, small_cfg.d_cond), dtype=np.float32))
        muted = CondBundle(cond.text_tokens, cond.speak_frames, cond.listen_frames,
                           cond.ref_tokens, mute_speak=True, mute_listen=True)
        zeroed = CondBundle(cond.text_tokens, zeros, zeros, cond.ref_tokens)
        a = small_model.forward_joint(chunks, [1.0], [muted]).out_chunks[0]
        b = small_model.forward_joint(chunks, [1.0], [zeroed]).out_chunks[0]
        np.testing.assert_array_equal(a, b)

    def test_muted_stream_skips_branch(self, small_model, small_cfg):
        # with both streams muted, audio frames are irrelevant entirely
        rng = np.random.default_rng(6)
        chunks = _chunks(rng, small_cfg, 1)
        c1 = make_cond(small_cfg, rng, mute_speak=True, mute_listen=True)
        c2 = CondBundle(c1.text_tokens, rand_t2d(rng, c1.speak_frames.rows, small_cfg.d_cond),
                        rand_t2d(rng, c1.listen_frames.rows, small_cfg.d_cond),
                        c1.ref_tokens, mute_speak=True, mute_listen=True)
        a = small_model.forward_joint(chunks, [1.0], [c1]).out_chunks[0]
        b = small_model.forward_joint(chunks, [1.0], [c2]).out_chunks[0]
        np.testing.assert_array_equal(a, b)


class TestExports:
    def test_layer0_k_pre_recomputation(self, small_model, small_cfg):
        rng = np.random.default_rng(7)
        chunks = _chunks(rng, small_cfg, 1)
        cond = make_cond(small_cfg, rng)
        res = small_model.forward_joint(chunks, [1.0], [cond])
        tpc = small_cfg.tokens_per_chunk
        # layer 0 sees the raw input: k_pre = modulate(norm(x)) @ w_k, no rotation
        x = np.concatenate([chunks[0], cond.ref_tokens.a], axis=0)
        table = small_model._mod_table([1.0, 0.0])
        mods = np.stack([table[1.0][0][0]] * tpc + [table[0.0][0][0]] * cond.ref_tokens.rows)
        sh, sc = np.split(mods, 6, axis=1)[:2]
        x_hat = td._modulate(td._norm(x), sh, sc)
        want = x_hat @ small_model.weights.blocks[0].w_k
        np.testing.assert_array_equal(res.chunk_exports[0].k_pre[0], want[:tpc])
        np.testing.assert_array_equal(res.ref_export.k_pre[0], want[tpc:])

    def test_exports_differ_when_inputs_differ(self, small_model, small_cfg):
        rng = np.random.default_rng(8)
        cond = make_cond(small_cfg, rng)
        a, b = _chunks(rng, small_cfg, 2)
        ea = small_model.forward_joint([a], [1.0], [cond]).chunk_exports[0]
        eb = small_model.forward_joint([b], [1.0], [cond]).chunk_exports[0]
        assert np.abs(ea.k_pre[0] - eb.k_pre[0]).max() > 0

    def test_ref_export_constant_across_chunks(self, small_model, small_cfg):
        rng = np.random.default_rng(9)
        ref = make_ref(small_cfg, rng)
        for _ in range(3):
            chunks = _chunks(rng, small_cfg, 2)
            conds = [make_cond(small_cfg, rng, ref=ref) for _ in range(2)]
            res = small_model.forward_joint(chunks, [1.0, 0.5], conds)
            pre = small_model.prefill_references(ref)
            for layer in range(small_cfg.n_layers):
                np.testing.assert_array_equal(res.ref_export.k_pre[layer], pre.k_pre[layer])
                np.testing.assert_array_equal(res.ref_export.v[layer], pre.v[layer])


class TestPredictWrappers:
    def _setup(self, small_model, small_cfg, seed=10):
        rng = np.random.default_rng(seed)
        sched = TimestepSchedule()
        policy = RetentionPolicy(3, 2)
        ref = make_ref(small_cfg, rng)
        cond = make_cond(small_cfg, rng, ref=ref)
        chunks = _chunks(rng, small_cfg, 2)
        return rng, sched, policy, ref, cond, chunks

    def test_backbone_level_restriction(self, small_model, small_cfg):
        _, sched, _, _, cond, chunks = self._setup(small_model, small_cfg)
        with pytest.raises(ScheduleError):
            backbone_predict(small_model, chunks, [sched.T2, sched.T2], [cond, cond], sched)
        with pytest.raises(ScheduleError):
            # decreasing noise toward later chunks violates the schedule
            backbone_predict(small_model, chunks, [sched.T0, sched.T1], [cond, cond], sched)
        res = backbone_predict(small_model, chunks, [sched.T1, sched.T0], [cond, cond], sched)
        assert len(res.out_chunks) == 2

    def test_refiner_level_restriction(self, small_model, small_cfg):
        _, sched, _, _, cond, chunks = self._setup(small_model, small_cfg)
        with pytest.raises(ScheduleError):
            refiner_predict(small_model, chunks[:1], [sched.T1], [cond], sched)
        res = refiner_predict(small_model, chunks[:1], [sched.T2], [cond], sched)
        assert res.out_chunks[0].shape == chunks[0].shape

    def test_cached_path_matches_joint(self, small_model, small_cfg):
        # one-chunk history: cached backbone step == joint forward of both chunks
        rng, sched, policy, ref, cond, chunks = self._setup(small_model, small_cfg)
        conds = [cond, make_cond(small_cfg, rng, ref=ref)]
        joint = small_model.forward_joint(chunks, [sched.T0, sched.T0], conds)

        pair = CachePair.fresh(small_cfg.n_layers)
        pair.noisy.insert_reference(small_model.prefill_references(ref), small_cfg.ref_positions())
        pair.noisy.insert_chunk(0, joint.chunk_exports[0], policy)
        win = pair.noisy.assemble_window(1, policy, small_cfg.rope,
                                         small_cfg.tokens_per_chunk, include_current=False)
        pos = current_positions(1, policy, small_cfg.tokens_per_chunk)
        out, _ = small_model.forward_chunk(chunks[1], sched.T0, conds[1], pos, win)
        np.testing.assert_allclose(out, joint.out_chunks[1], atol=1e-5)

    def test_forward_chunk_rejects_current_window(self, small_model, small_cfg):
        rng, sched, policy, ref, cond, chunks = self._setup(small_model, small_cfg)
        joint = small_model.forward_joint(chunks[:1], [sched.T0], [cond])
        pair = CachePair.fresh(small_cfg.n_layers)
        pair.noisy.insert_chunk(0, joint.chunk_exports[0], policy)
        win = pair.noisy.assemble_window(0, policy, small_cfg.rope,
                                         small_cfg.tokens_per_chunk, include_current=True)
        pos = current_positions(0, policy, small_cfg.tokens_per_chunk)
        with pytest.raises(ValueError, match="include_current"):
            small_model.forward_chunk(chunks[0], sched.T0, cond, pos, win)


class TestCheckpointing:
    def test_save_load_round_trip(self, small_model, small_cfg, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(path, small_model)
        again = load_model(path)
        assert again.config == small_cfg
        assert again.weights.digest() == small_model.weights.digest()
        rng = np.random.default_rng(11)
        chunks = _chunks(rng, small_cfg, 1)
        cond = make_cond(small_cfg, rng)
        a = small_model.forward_joint(chunks, [1.0], [cond]).out_chunks[0]
        b = again.forward_joint(chunks, [1.0], [cond]).out_chunks[0]
        np.testing.assert_array_equal(a, b)

    def test_clone_independent(self, small_cfg):
        w = random_weights(small_cfg, seed=3)
        c = clone_weights(w)
        assert c.digest() == w.digest()
        c.blocks[0].w_q[0, 0] += 1.0
        assert c.digest() != w.digest()


def test_silence_cond_shape_and_flags(small_cfg):
    ref = make_ref(small_cfg, np.random.default_rng(12))
    cond = silence_cond(small_cfg, ref, n_text=2)
    assert cond.mute_speak and cond.mute_listen
    assert cond.speak_frames.rows == int(round(3 * small_cfg.audio_fps))
    assert not cond.speak_frames.a.any()
    assert cond.text_tokens.rows == 2
    # digest is sensitive to every part
    other = silence_cond(small_cfg, ref, n_text=3)
    assert cond.digest() != other.digest()

"""Acceptance suite: the eleven pinned criteria, one verdict line each.

Every test prints a single `A<k>: PASS/FAIL` line directly to the terminal
(bypassing capture) so a full run reads as a checklist. Tolerances are
pinned here and must not be loosened to make a failing criterion green.
"""
from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import make_cond, make_ref
from test_distill import numeric_grad, rel_err

from lpm.denoise import (
    NoiseSource,
    TimestepSchedule,
    fresh_state,
    renoise,
    rollout,
    rollout_iter,
)
from lpm.distill.dmd import dmd_generator_step
from lpm.distill.evalkit import eval_pair
from lpm.distill.nets import Mlp, ToyGenerator
from lpm.distill.teacher import default_teacher
from lpm.kvcache import RetentionPolicy, retained_set
from lpm.pipeline import metrics, realtime_margin, run as pipeline_run, validate_dependencies
from lpm.runtime.audio import AudioBuffer, chunk_audio
from lpm.runtime.events import ControlEvent
from lpm.runtime.session import SessionConfig, run_session
from lpm.toydit import CausalToyModel, CondBundle, ModelConfig, random_weights

SCHED = TimestepSchedule()
TINY = ModelConfig(
    n_layers=2, d_model=16, n_heads=2, tokens_per_chunk=4, d_cond=8, d_ffn=32
)


@pytest.fixture
def criterion(capfd):
    """Context manager printing one uncaptured verdict line per criterion."""

    @contextmanager
    def _criterion(tag: str):
        info = {"detail": ""}
        try:
            yield info
        except BaseException:
            with capfd.disabled():
                print(f"\n{tag}: FAIL", flush=True)
            raise
        with capfd.disabled():
            print(f"\n{tag}: PASS  {info['detail']}".rstrip(), flush=True)

    return _criterion


def ev_event(at: float, name: str) -> ControlEvent:
    return ControlEvent(at=at, kind="event", data={"name": name})


def ev_text(at: float, text: str) -> ControlEvent:
    return ControlEvent(at=at, kind="text", data={"text": text})


# ---------------------------------------------------------------------------


def test_a1_pre_rope_cache_equivalence(criterion):
    """Cached incremental attention == full-window joint recompute (<1e-5)."""
    with criterion("A1 pre-RoPE cache equivalence") as c:
        t_wall = time.perf_counter()
        cfg = ModelConfig()  # full default size
        rng = np.random.default_rng(0)
        backbone = CausalToyModel(cfg, random_weights(cfg, seed=0))
        refiner = CausalToyModel(cfg, random_weights(cfg, seed=1))
        ref = make_ref(cfg, rng)
        conds = [make_cond(cfg, rng, ref=ref) for _ in range(8)]
        # retain everything so the cached window is the full history
        policy = RetentionPolicy(sink_chunks=8, recent_chunks=2)

        state = fresh_state(backbone, refiner, policy, SCHED, seed=0, ref_tokens=ref)
        cached = rollout(state, 8, lambda k: conds[k])

        # recompute twin: same noise stream, no KV caches, joint forwards only
        noise = NoiseSource(0)
        shape = (cfg.tokens_per_chunk, cfg.d_model)
        xs_t1: list[np.ndarray] = []
        xs_t2: list[np.ndarray] = []
        worst = 0.0
        for k in range(8):
            eps0 = noise.child(k, 0).normal(shape)
            hist_t = [SCHED.T1] * k
            first = backbone.forward_joint(
                xs_t1 + [eps0], hist_t + [SCHED.T0], conds[: k + 1]
            )
            x_t1 = renoise(first.out_chunks[-1], SCHED.T1, noise.child(k, 1).normal(shape))
            second = backbone.forward_joint(
                xs_t1 + [x_t1], hist_t + [SCHED.T1], conds[: k + 1]
            )
            x_t2 = renoise(second.out_chunks[-1], SCHED.T2, noise.child(k, 2).normal(shape))
            refined = refiner.forward_joint(
                xs_t2 + [x_t2], [SCHED.T2] * (k + 1), conds[: k + 1]
            )
            worst = max(
                worst,
                float(np.abs(second.out_chunks[-1] - cached[k].backbone_out).max()),
                float(np.abs(refined.out_chunks[-1] - cached[k].chunk.tokens.a).max()),
            )
            xs_t1.append(x_t1)
            xs_t2.append(x_t2)

        elapsed = time.perf_counter() - t_wall
        assert worst < 1e-5
        assert elapsed < 10.0
        c["detail"] = f"max abs diff {worst:.2e} over 8 chunks in {elapsed:.2f}s"


def test_a2_retention_arithmetic(criterion):
    """sink=3 + recent(incl. current)=2 keeps exactly 5 chunks from k>=4."""
    with criterion("A2 retention arithmetic") as c:
        policy = RetentionPolicy(3, 2)
        sizes = {len(retained_set(k, policy)) for k in range(4, 256)}
        assert sizes == {5}
        for k in range(4):  # ramp-up is everything so far
            assert retained_set(k, policy) == tuple(range(k + 1))

        rng = np.random.default_rng(1)
        backbone = CausalToyModel(TINY, random_weights(TINY, seed=0))
        refiner = CausalToyModel(TINY, random_weights(TINY, seed=1))
        ref = make_ref(TINY, rng)
        state = fresh_state(backbone, refiner, policy, SCHED, seed=0, ref_tokens=ref)
        cond = make_cond(TINY, rng, ref=ref)
        counts = []
        for k, res in enumerate(rollout_iter(state, 10, lambda _k: cond)):
            assert res.record.retained == retained_set(k, policy)
            counts.append(
                (state.caches.noisy.entry_count(), state.caches.clean.entry_count())
            )
        for k, (noisy_n, clean_n) in enumerate(counts):
            want = min(k + 1, 5) * TINY.n_layers
            assert noisy_n == clean_n == want
        assert len(set(counts[4:])) == 1  # constant thereafter
        c["detail"] = f"retained size 5, stored entries {counts[-1][0]}+{counts[-1][1]} constant"


def test_a3_causality(criterion):
    """No perturbation of chunk j ever changes outputs of chunks < j."""
    with criterion("A3 causality") as c:
        n = 6
        rng = np.random.default_rng(2)
        backbone = CausalToyModel(TINY, random_weights(TINY, seed=3))
        refiner = CausalToyModel(TINY, random_weights(TINY, seed=4))
        ref = make_ref(TINY, rng)
        conds = [make_cond(TINY, rng, ref=ref) for _ in range(n)]
        policy = RetentionPolicy(3, 2)

        def run_with(cond_list):
            state = fresh_state(backbone, refiner, policy, SCHED, seed=0, ref_tokens=ref)
            return rollout(state, n, lambda k: cond_list[k])

        base = run_with(conds)
        worst = 0.0
        for j in range(n):  # conditioning perturbation at chunk j
            mod = list(conds)
            mod[j] = make_cond(TINY, rng, ref=ref)
            res = run_with(mod)
            for i in range(j):
                worst = max(
                    worst,
                    float(np.abs(res[i].chunk.tokens.a - base[i].chunk.tokens.a).max()),
                )
            assert np.abs(res[j].chunk.tokens.a - base[j].chunk.tokens.a).max() > 0
        assert worst <= 1e-6

        # latent-input perturbation, joint forward
        xs = [
            rng.standard_normal((TINY.tokens_per_chunk, TINY.d_model)).astype(np.float32)
            for _ in range(n)
        ]
        joint = backbone.forward_joint(xs, [SCHED.T1] * n, conds)
        for j in range(n):
            bumped = list(xs)
            bumped[j] = bumped[j] + 1.0
            out = backbone.forward_joint(bumped, [SCHED.T1] * n, conds)
            for i in range(j):
                worst = max(
                    worst, float(np.abs(out.out_chunks[i] - joint.out_chunks[i]).max())
                )
            assert np.abs(out.out_chunks[j] - joint.out_chunks[j]).max() > 0
        assert worst <= 1e-6
        c["detail"] = f"exhaustive over {n} chunks, max leak {worst:.1e}"


def test_a4_pipeline_timing(criterion):
    """(700,700,180) stages: TTFR 1580 exactly, steady period 700 +-5%."""
    with criterion("A4 pipeline timing") as c:
        trace = pipeline_run(20)
        validate_dependencies(trace)
        m = metrics(trace)
        assert m["ttfr_ms"] == 1580.0
        assert abs(m["steady_period_ms"] - 700.0) <= 0.05 * 700.0
        slack = realtime_margin(trace, chunk_duration_ms=1000.0)
        assert min(slack) >= 0.0
        assert slack[-1] > 0.0 and slack[-1] >= slack[1]
        c["detail"] = (
            f"ttfr {m['ttfr_ms']:.0f} ms, period {m['steady_period_ms']:.0f} ms, "
            f"final slack {slack[-1]:.0f} ms"
        )


def test_a5_nfe_accounting(criterion):
    """Every chunk costs exactly 2 backbone + 1 refiner evaluations."""
    with criterion("A5 NFE accounting") as c:
        rng = np.random.default_rng(3)
        backbone = CausalToyModel(TINY, random_weights(TINY, seed=5))
        refiner = CausalToyModel(TINY, random_weights(TINY, seed=6))
        ref = make_ref(TINY, rng)
        cond = make_cond(TINY, rng, ref=ref)
        state = fresh_state(
            backbone, refiner, RetentionPolicy(3, 2), SCHED, seed=0, ref_tokens=ref
        )
        results = rollout(state, 8, lambda k: cond)
        for res in results:
            assert (res.record.nfe_backbone, res.record.nfe_refiner) == (2, 1)
        msgs = run_session(SessionConfig(model=TINY), [], 4).messages
        for msg in msgs:
            if msg["type"] == "chunk":
                assert msg["nfe"] == {"backbone": 2, "refiner": 1}
        c["detail"] = "2+1 on all denoiser records and session messages"


def test_a6_audio_chunking(criterion):
    """60 windows: 2 s shared between neighbours, 1 s stride, step-0 padded."""
    with criterion("A6 audio chunking") as c:
        sr = 1000
        buf = AudioBuffer(sample_rate=sr)
        buf.append(np.arange(61 * sr, dtype=np.float32), at_ms=0.0)
        wins = [chunk_audio(buf, k) for k in range(60)]
        for k in range(59):
            np.testing.assert_array_equal(  # exactly 2 s of overlap
                wins[k].samples[sr:], wins[k + 1].samples[: 2 * sr]
            )
            assert not np.array_equal(wins[k].samples, wins[k + 1].samples)
        for k, win in enumerate(wins):
            assert win.samples.shape == (3 * sr,)
            np.testing.assert_array_equal(  # stride exactly 1 s
                win.samples[2 * sr :], np.arange(k * sr, (k + 1) * sr, dtype=np.float32)
            )
            assert win.history_padded == (k < 2)
        np.testing.assert_array_equal(wins[0].samples[: 2 * sr], 0.0)
        c["detail"] = "60 steps, overlap/stride/padding exact"


def _random_script(rng: np.random.Generator) -> list[ControlEvent]:
    names = (
        "user_speech_start",
        "user_speech_end",
        "agent_speech_start",
        "agent_speech_end",
        "interrupt",
    )
    rows = []
    for _ in range(int(rng.integers(1, 5))):
        rows.append(ev_event(float(rng.integers(0, 7000)), str(rng.choice(names))))
    if rng.random() < 0.5:
        rows.append(ev_text(float(rng.integers(0, 7000)), "fuzz"))
    return sorted(rows, key=lambda e: e.at)


def test_a7_boundary_isolation(criterion):
    """1000 fuzzed sessions: no mid-generation event moves a cond hash."""
    with criterion("A7 boundary isolation") as c:
        n_sessions, n_chunks, lookahead = 1000, 6, 2
        rng = np.random.default_rng(7)
        checked = 0
        for s in range(n_sessions):
            cfg = SessionConfig(model=TINY, seed=int(rng.integers(0, 2**31)))
            script = _random_script(rng)
            base = run_session(cfg, list(script), n_chunks).messages
            chunks = [m for m in base if m["type"] == "chunk"]
            tail = chunks[-1]["index"]
            target = int(rng.integers(1, tail + 1))
            t0 = chunks[target]["timings"]["generator"]["start"]
            t1 = chunks[target]["timings"]["decoder"]["finish"]
            t_inject = t0 + (t1 - t0) * float(rng.uniform(0.05, 0.95))
            extra = (
                ev_text(t_inject, "intruder")
                if rng.random() < 0.5
                else ev_event(t_inject, "interrupt")
            )
            fuzzed = run_session(
                cfg, sorted(script + [extra], key=lambda e: e.at), n_chunks
            ).messages
            f_chunks = [m for m in fuzzed if m["type"] == "chunk"]
            for b, f in zip(chunks, f_chunks):
                if b["timings"]["generator"]["start"] <= t_inject:
                    assert f["cond_hash"] == b["cond_hash"], (s, b["index"])
                    checked += 1
            for msgs in (base, fuzzed):
                met = msgs[-1]
                assert met["type"] == "metrics"
                assert met["max_lookahead"] <= lookahead
        c["detail"] = f"{n_sessions} sessions, {checked} in-flight hashes stable, lookahead <= {lookahead}"


def test_a8_parity_routing(criterion):
    """Even layers never see listen frames; odd layers never see speak."""
    with criterion("A8 parity routing") as c:
        cfg = ModelConfig(
            n_layers=4, d_model=16, n_heads=2, tokens_per_chunk=4, d_cond=8, d_ffn=32
        )
        rng = np.random.default_rng(8)
        for seed in range(100):
            model = CausalToyModel(cfg, random_weights(cfg, seed=seed))
            x = rng.standard_normal((cfg.tokens_per_chunk, cfg.d_model)).astype(np.float32)
            cond = make_cond(cfg, rng)
            bump_listen = CondBundle(
                cond.text_tokens,
                cond.speak_frames,
                make_cond(cfg, rng).listen_frames,
                cond.ref_tokens,
            )
            bump_speak = CondBundle(
                cond.text_tokens,
                make_cond(cfg, rng).speak_frames,
                cond.listen_frames,
                cond.ref_tokens,
            )
            for block in model.weights.blocks:
                base = model._cross_attention(block, x, cond)
                same = model._cross_attention(
                    block, x, bump_listen if block.speaks else bump_speak
                )
                diff = model._cross_attention(
                    block, x, bump_speak if block.speaks else bump_listen
                )
                np.testing.assert_array_equal(base, same)  # bit-identical
                assert np.abs(base - diff).max() > 0
        c["detail"] = "100 models x 4 blocks, untouched stream bit-identical"


def test_a9_distillation_curriculum(criterion, curriculum_result):
    """Seeded 4-stage run: modes alive, accurate, drift-hardened, refined."""
    with criterion("A9 distillation curriculum") as c:
        res = curriculum_result
        assert res["seconds"]["total"] < 600.0
        evals = res["evals"]
        for key in ("backbone_2nfe", "full_3nfe"):
            assert min(evals[key]["occupancy"]) >= 0.30, key
            assert max(evals[key]["mean_err_sigma"]) < 0.15, key
        assert evals["stage3_drift"] <= 0.8 * evals["stage2_drift"]
        pairs = [
            eval_pair(
                res["gen"], res["refiner"], res["teacher"], 4000, 4, SCHED, seed=s
            )
            for s in (11, 123, 7, 42, 1000)
        ]
        w2_2 = float(np.mean([p["w2_2nfe"] for p in pairs]))
        w2_3 = float(np.mean([p["w2_3nfe"] for p in pairs]))
        assert w2_3 <= w2_2
        c["detail"] = (
            f"{res['seconds']['total']:.0f}s, occ {min(evals['full_3nfe']['occupancy']):.2f}, "
            f"drift {evals['stage2_drift']:.3f}->{evals['stage3_drift']:.3f}, "
            f"W2 {w2_2:.4f}->{w2_3:.4f}"
        )


class _OracleFake:
    def __init__(self, teacher):
        self.teacher = teacher

    def predict_cond(self, x_t, t, hist):
        return self.teacher.score(x_t, t, hist)


class _GradTap(ToyGenerator):
    def backward(self, cache, dy):
        grads, dx = super().backward(cache, dy)
        self.last_grads = grads
        return grads, dx


def test_a10_gradient_and_score_oracles(criterion):
    """Backprop vs FD < 1e-3; score vs FD log-density < 1e-4; DMD zero."""
    with criterion("A10 gradient and score oracles") as c:
        rng = np.random.default_rng(10)
        net = Mlp(3, 6, 2, rng)
        x = rng.standard_normal((4, 3))
        tgt = rng.standard_normal((4, 2))
        y, cache = net.forward(x)
        grads, _ = net.backward(cache, 2.0 * (y - tgt))
        worst_bp = 0.0
        for name, g in grads.items():
            fd = numeric_grad(
                lambda: float(((net.forward(x)[0] - tgt) ** 2).sum()), net.params[name]
            )
            worst_bp = max(worst_bp, rel_err(g, fd))
        assert worst_bp < 1e-3

        teacher = default_teacher()
        worst_score = 0.0
        h = 1e-5
        for t in (0.02, 0.3, 0.7, 0.98):
            pts = rng.standard_normal((32, 2)) * 1.5
            prev = rng.standard_normal((32, 2))
            analytic = teacher.score(pts, t, prev)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                fd = (
                    teacher.log_density(pts + e, t, prev)
                    - teacher.log_density(pts - e, t, prev)
                ) / (2 * h)
                worst_score = max(worst_score, float(np.abs(analytic[:, j] - fd).max()))
        assert worst_score < 1e-4

        gen = _GradTap(dim=2, seed=1)
        prev = np.zeros((64, 2))
        info = dmd_generator_step(
            gen, None, _OracleFake(teacher), teacher,
            rng.standard_normal((64, 2)), 0.7, prev, prev, np.random.default_rng(0),
        )
        assert info.mean_grad_norm == 0.0 and info.grad_out_norm == 0.0
        assert all((g == 0.0).all() for g in gen.last_grads.values())
        c["detail"] = f"backprop {worst_bp:.1e}, score {worst_score:.1e}, DMD grad exactly 0"


def test_a11_determinism(criterion, tmp_path):
    """Same seed + script => identical traces; 5-chunk prefix of 20 matches."""
    with criterion("A11 determinism") as c:
        script = [
            ev_event(1500.0, "user_speech_start"),
            ev_event(2500.0, "user_speech_end"),
            ev_event(3000.0, "agent_speech_start"),
        ]
        paths = []
        for i in (0, 1):
            p = tmp_path / f"trace{i}.ndjson"
            run_session(SessionConfig(model=TINY, seed=11), list(script), 6, str(p))
            paths.append(p.read_bytes())
        assert paths[0] == paths[1]

        short = run_session(SessionConfig(model=TINY, seed=11), list(script), 5).messages
        long = run_session(SessionConfig(model=TINY, seed=11), list(script), 20).messages
        short_chunks = [m for m in short if m["type"] == "chunk"]
        long_chunks = [m for m in long if m["type"] == "chunk"]
        assert short_chunks == long_chunks[:5]

        # denoiser-level prefix on hashes (wall timings excluded by design)
        rng = np.random.default_rng(12)
        backbone = CausalToyModel(TINY, random_weights(TINY, seed=0))
        refiner = CausalToyModel(TINY, random_weights(TINY, seed=1))
        ref = make_ref(TINY, rng)
        cond = make_cond(TINY, rng, ref=ref)

        def hashes(n):
            state = fresh_state(
                backbone, refiner, RetentionPolicy(3, 2), SCHED, 3, ref
            )
            return [
                (r.record.latent_hash, r.record.cond_hash, r.record.retained)
                for r in rollout(state, n, lambda k: cond)
            ]

        assert hashes(5) == hashes(20)[:5]
        c["detail"] = "byte-identical traces, prefix (5, 20) exact"

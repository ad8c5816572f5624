"""Few-step chunk generation: 2-NFE backbone + 1-NFE refiner.

Per chunk: the backbone predicts clean latents from a pure Gaussian draw at
T0, the prediction is re-noised to T1 and predicted again (fresh noise by
default), then the refiner recovers the final chunk from a T2 re-noise.
Noisy-history KV export from the second backbone pass, clean-history from
the refiner pass; both caches evict at the chunk boundary after insertion.

Noise draws come from per-(chunk, role) substreams so stage overlap can
never reorder consumption.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ScheduleError
from .kvcache import CachePair, RetentionPolicy, current_positions
from .latcore import LatentChunk, Tensor2D, array_digest
from .toydit import CausalToyModel, CondBundle, backbone_predict, refiner_predict


@dataclass(frozen=True)
class TimestepSchedule:
    """Strictly decreasing few-step levels 1 >= T0 > T1 > T2 > 0."""

    T0: float = 1.0
    T1: float = 0.5
    T2: float = 0.3

    def __post_init__(self):
        if not (1.0 >= self.T0 > self.T1 > self.T2 > 0.0):
            raise ScheduleError(
                f"need 1 >= T0 > T1 > T2 > 0, got ({self.T0}, {self.T1}, {self.T2})"
            )

    @property
    def levels(self) -> Tuple[float, float, float]:
        return (self.T0, self.T1, self.T2)


def renoise(x0: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
    """Rectified-flow corruption x_t = (1 - t) * x0 + t * eps; dtype-preserving."""
    if not (0.0 <= t <= 1.0):
        raise ScheduleError(f"renoise level must lie in [0, 1], got {t}")
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ScheduleError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    dt = x0.dtype
    return ((1.0 - t) * x0 + t * eps).astype(dt)


class NoiseSource:
    """Seeded Gaussian stream with deterministic child substreams."""

    def __init__(self, seed: int, _key: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        self._rng = np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=self._key)
        )

    def child(self, *key: int) -> "NoiseSource":
        return NoiseSource(self.seed, self._key + tuple(key))

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._rng.standard_normal(shape).astype(dtype)


# role ids for per-chunk noise substreams
_ROLE_INIT, _ROLE_SECOND, _ROLE_REFINE = 0, 1, 2


@dataclass
class ChunkRecord:
    """Per-chunk rollout bookkeeping for the NDJSON trace."""

    index: int
    t_vec: Tuple[float, float, float]
    nfe_backbone: int
    nfe_refiner: int
    latent_hash: str
    backbone_hash: str
    gen_ms: float
    refine_ms: float
    cond_hash: str
    retained: Tuple[int, ...]

    def to_json(self) -> str:
        return json.dumps(
            {
                "index": self.index,
                "t_vec": list(self.t_vec),
                "nfe": {"backbone": self.nfe_backbone, "refiner": self.nfe_refiner},
                "latent_hash": self.latent_hash,
                "backbone_hash": self.backbone_hash,
                "timings": {"gen_ms": round(self.gen_ms, 3), "refine_ms": round(self.refine_ms, 3)},
                "cond_hash": self.cond_hash,
                "retained": list(self.retained),
            },
            separators=(",", ":"),
        )


@dataclass
class GenerationState:
    """Everything generate_chunk needs per session: models, caches, policy."""

    backbone: CausalToyModel
    refiner: CausalToyModel
    caches: CachePair
    policy: RetentionPolicy
    sched: TimestepSchedule
    noise: NoiseSource
    reuse_second_eval_noise: bool = False

    def prefill(self, ref_tokens: Tensor2D) -> None:
        cfg = self.backbone.config
        self.caches.noisy.insert_reference(
            self.backbone.prefill_references(ref_tokens), cfg.ref_positions()
        )
        self.caches.clean.insert_reference(
            self.refiner.prefill_references(ref_tokens), cfg.ref_positions()
        )


@dataclass
class ChunkResult:
    chunk: LatentChunk
    backbone_out: np.ndarray
    record: ChunkRecord
    noisy_kv_inserted: bool = True


def generate_backbone(
    state: GenerationState, index: int, cond: CondBundle
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Two backbone evaluations for one chunk; inserts noisy KV from the
    second pass. Returns (x0_hat, second-pass input, nfe)."""
    cfg = state.backbone.config
    sched = state.sched
    shape = (cfg.tokens_per_chunk, cfg.d_model)
    eps0 = state.noise.child(index, _ROLE_INIT).normal(shape)
    x_t0 = eps0  # T0 input is the raw Gaussian draw

    window = state.caches.noisy.assemble_window(
        index, state.policy, cfg.rope, cfg.tokens_per_chunk, include_current=False
    )
    positions = current_positions(index, state.policy, cfg.tokens_per_chunk)

    first = backbone_predict(
        state.backbone, [x_t0], [sched.T0], [cond], sched, window, positions
    )
    eps1 = eps0 if state.reuse_second_eval_noise else state.noise.child(index, _ROLE_SECOND).normal(shape)
    x_t1 = renoise(first.out_chunks[0], sched.T1, eps1)
    second = backbone_predict(
        state.backbone, [x_t1], [sched.T1], [cond], sched, window, positions
    )
    state.caches.noisy.insert_chunk(index, second.chunk_exports[0], state.policy)
    return second.out_chunks[0], x_t1, 2


def generate_refiner(
    state: GenerationState, index: int, cond: CondBundle, backbone_out: np.ndarray
) -> Tuple[np.ndarray, int]:
    """Refiner pass: re-noise the backbone output to T2 and recover the final
    chunk against the clean-history cache; inserts clean KV."""
    cfg = state.refiner.config
    sched = state.sched
    eps2 = state.noise.child(index, _ROLE_REFINE).normal(backbone_out.shape)
    x_t2 = renoise(backbone_out, sched.T2, eps2)

    window = state.caches.clean.assemble_window(
        index, state.policy, cfg.rope, cfg.tokens_per_chunk, include_current=False
    )
    positions = current_positions(index, state.policy, cfg.tokens_per_chunk)
    res = refiner_predict(
        state.refiner, [x_t2], [sched.T2], [cond], sched, window, positions
    )
    state.caches.clean.insert_chunk(index, res.chunk_exports[0], state.policy)
    return res.out_chunks[0], 1


def generate_chunk(state: GenerationState, index: int, cond: CondBundle) -> ChunkResult:
    """Full 3-NFE chunk generation; evicts both caches at the boundary."""
    t_start = time.perf_counter()
    backbone_out, _, nfe_b = generate_backbone(state, index, cond)
    t_mid = time.perf_counter()
    final, nfe_r = generate_refiner(state, index, cond, backbone_out)
    t_end = time.perf_counter()

    state.caches.evict_for(index, state.policy)
    sched = state.sched
    rec = ChunkRecord(
        index=index,
        t_vec=(sched.T0, sched.T1, sched.T2),
        nfe_backbone=nfe_b,
        nfe_refiner=nfe_r,
        latent_hash=array_digest(final),
        backbone_hash=array_digest(backbone_out),
        gen_ms=(t_mid - t_start) * 1000.0,
        refine_ms=(t_end - t_mid) * 1000.0,
        cond_hash=cond.digest(),
        retained=state.caches.clean.stored_chunks(),
    )
    return ChunkResult(
        chunk=LatentChunk(index, Tensor2D(final), 0.0),
        backbone_out=backbone_out,
        record=rec,
    )


def rollout_iter(
    state: GenerationState,
    n_chunks: int,
    cond_fn: Callable[[int], CondBundle],
) -> Iterator[ChunkResult]:
    """Generate chunks 0..n-1 sequentially at constant memory (the caller
    decides whether to keep them)."""
    if n_chunks < 0:
        raise ValueError(f"n_chunks must be >= 0, got {n_chunks}")
    for k in range(n_chunks):
        yield generate_chunk(state, k, cond_fn(k))


def rollout(
    state: GenerationState,
    n_chunks: int,
    cond_fn: Callable[[int], CondBundle],
    trace_path: Optional[str] = None,
) -> List[ChunkResult]:
    results = []
    sink = open(trace_path, "w") if trace_path else None
    try:
        for res in rollout_iter(state, n_chunks, cond_fn):
            results.append(res)
            if sink:
                sink.write(res.record.to_json() + "\n")
    finally:
        if sink:
            sink.close()
    return results


def fresh_state(
    backbone: CausalToyModel,
    refiner: CausalToyModel,
    policy: RetentionPolicy,
    sched: TimestepSchedule,
    seed: int,
    ref_tokens: Tensor2D,
    reuse_second_eval_noise: bool = False,
) -> GenerationState:
    """Build a prefilled GenerationState ready for chunk 0."""
    state = GenerationState(
        backbone=backbone,
        refiner=refiner,
        caches=CachePair.fresh(backbone.config.n_layers),
        policy=policy,
        sched=sched,
        noise=NoiseSource(seed),
        reuse_second_eval_noise=reuse_second_eval_noise,
    )
    state.prefill(ref_tokens)
    return state

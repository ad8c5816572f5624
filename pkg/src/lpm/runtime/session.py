"""Duplex session engine.

One engine drives both execution modes:

* script mode: events come from a pre-timed NDJSON script and the schedule
  is computed analytically, so two runs of the same script and seed produce
  byte-identical traces;
* live mode: events arrive from a client connection and a wall clock paces
  the same bookkeeping (see service.py).

The contract both modes share: conditioning inputs change only at chunk
boundaries (last writer wins within a window), generation may run at most
``lookahead`` chunks ahead of playback, and the first ``sink_chunks``
warmup chunks are generated ungated and discarded.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Optional

import numpy as np

from ..denoise import (
    GenerationState,
    TimestepSchedule,
    fresh_state,
    generate_backbone,
    generate_refiner,
)
from ..errors import ConfigError, ProtocolError
from ..kvcache import RetentionPolicy
from ..latcore import Tensor2D, array_digest
from ..pipeline import PipelineTrace, StageScheduler, default_stages, metrics as pipeline_metrics
from ..toydit import CausalToyModel, CondBundle, ModelConfig, clone_weights, random_weights
from .audio import AudioEncoder, StreamBuffers, TextEncoder, chunk_audio
from .events import ControlEvent, SessionState, mute_flags, transition
from .protocol import read_ndjson, script_row_to_event, write_ndjson


@dataclass
class SessionConfig:
    """Everything a session needs to be reproducible from a seed."""

    model: ModelConfig = field(default_factory=ModelConfig)
    policy: RetentionPolicy = field(default_factory=RetentionPolicy)
    sched: TimestepSchedule = field(default_factory=TimestepSchedule)
    seed: int = 0
    lookahead: int = 2
    stage_latency_ms: tuple = (700.0, 700.0, 180.0)
    chunk_duration_ms: float = 1000.0
    sample_rate: int = 16000
    playback: str = "auto"  # "auto" advances with the schedule, "ack" waits for the client
    speech_end_grace_ms: float = 0.0
    n_text_tokens: int = 4
    strict_audio: bool = False

    def __post_init__(self):
        if self.lookahead < 1:
            raise ConfigError(f"lookahead must be >= 1, got {self.lookahead}")
        if self.playback not in ("auto", "ack"):
            raise ConfigError(f"playback must be 'auto' or 'ack', got {self.playback!r}")
        if self.chunk_duration_ms <= 0:
            raise ConfigError("chunk_duration_ms must be positive")
        if len(self.stage_latency_ms) != 3:
            raise ConfigError("stage_latency_ms needs 3 entries")
        if self.speech_end_grace_ms < 0:
            raise ConfigError("speech_end_grace_ms must be >= 0")

    @property
    def warmup_chunks(self) -> int:
        return self.policy.sink_chunks

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SessionConfig":
        """Build from a start-message config object (unknown keys rejected)."""
        kw: dict[str, Any] = {}
        simple = (
            "seed", "lookahead", "chunk_duration_ms", "sample_rate",
            "playback", "speech_end_grace_ms", "n_text_tokens", "strict_audio",
        )
        try:
            for key, val in d.items():
                if key in simple:
                    kw[key] = val
                elif key == "stage_latency_ms":
                    kw[key] = tuple(float(x) for x in val)
                elif key == "model":
                    kw["model"] = ModelConfig.from_dict(val)
                elif key == "policy":
                    kw["policy"] = RetentionPolicy(**val)
                elif key == "sched":
                    kw["sched"] = TimestepSchedule(**val)
                else:
                    raise ProtocolError(f"unknown config key {key!r}")
            return cls(**kw)
        except ProtocolError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ProtocolError(f"bad session config: {exc}") from exc


@dataclass
class LookaheadGate:
    """Generation may lead playback by strictly less than ``limit`` chunks."""

    limit: int
    gen_head: int = 0  # chunks fully generated
    play_head: int = 0  # chunks fully played (warmup counts as played)

    def admissible(self) -> bool:
        return self.gen_head - self.play_head < self.limit

    def ack(self, index: int) -> None:
        self.play_head = max(self.play_head, index + 1)


@dataclass
class RefreshableState:
    """Conditioning inputs rebuilt at each boundary; last writer wins."""

    prompt: str = ""


@dataclass
class PersistentState:
    """State carried across boundaries, never reset by conditioning updates."""

    gen: GenerationState
    buffers: StreamBuffers


class ScriptFeed:
    """Pre-timed events, delivered in arrival order as boundaries advance."""

    live = False

    def __init__(self, events: Iterable[ControlEvent]):
        self._events = sorted(events, key=lambda e: e.at)
        self._i = 0

    def poll(self, t: float) -> list[ControlEvent]:
        out = []
        while self._i < len(self._events) and self._events[self._i].at <= t:
            out.append(self._events[self._i])
            self._i += 1
        return out

    def find_ack_time(self, required_head: int, current_head: int) -> Optional[float]:
        """Earliest time the play head reaches ``required_head``; None if never."""
        head = current_head
        for ev in self._events[self._i :]:
            if ev.kind == "play_ack":
                head = max(head, int(ev.data["index"]) + 1)
                if head >= required_head:
                    return ev.at
            elif ev.kind == "end" or (ev.kind == "event" and ev.data.get("name") == "end"):
                return None
        return None

    def earliest_end_time(self) -> Optional[float]:
        for ev in self._events[self._i :]:
            if ev.kind == "end" or (ev.kind == "event" and ev.data.get("name") == "end"):
                return ev.at
        return None


@dataclass
class ChunkSummary:
    index: int
    state: str
    admit_t: float
    cond_hash: str
    latent_hash: str
    underrun_user: bool
    underrun_agent: bool


@dataclass
class SessionTrace:
    """Everything a session run produced, message list first.

    ``messages`` is exactly what a client would have received, sorted by
    time; writing it to NDJSON gives the canonical replayable trace.
    """

    messages: list[dict] = field(default_factory=list)
    jobs: Optional[PipelineTrace] = None
    chunks: list[ChunkSummary] = field(default_factory=list)
    state_history: list[dict] = field(default_factory=list)
    gate_log: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def write_ndjson(self, path: str) -> None:
        write_ndjson(path, self.messages)

    def by_type(self, mtype: str) -> list[dict]:
        return [m for m in self.messages if m["type"] == mtype]


class SessionEngine:
    """Chunk-by-chunk session driver; see the module docstring for modes."""

    def __init__(
        self,
        config: SessionConfig,
        feed,
        sink: Optional[Callable[[dict], None]] = None,
        clock=None,
    ):
        self.config = config
        self.feed = feed
        self.sink = sink
        self.clock = clock
        cfg = config.model

        weights = random_weights(cfg, config.seed)
        backbone = CausalToyModel(cfg, weights)
        refiner = CausalToyModel(cfg, clone_weights(weights))  # refiner starts as a copy
        ref_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EF]))
        self.ref_tokens = Tensor2D(
            ref_rng.standard_normal((cfg.n_ref_tokens, cfg.d_model)).astype(np.float32)
        )
        gen = fresh_state(
            backbone, refiner, config.policy, config.sched, config.seed, self.ref_tokens
        )
        self.persist = PersistentState(gen=gen, buffers=StreamBuffers.fresh(config.sample_rate))
        self.refresh = RefreshableState()

        self.audio_enc = AudioEncoder(cfg.d_cond, config.sample_rate, cfg.audio_fps, config.seed)
        self.text_enc = TextEncoder(cfg.d_cond, config.seed, config.n_text_tokens)
        self.n_frames = int(round(3 * cfg.audio_fps))

        self.state = SessionState.WARMUP
        self.gate = LookaheadGate(config.lookahead, play_head=config.warmup_chunks)
        self.pipe = StageScheduler(default_stages(config.stage_latency_ms), work=self._stage_work)
        self.trace = SessionTrace(jobs=PipelineTrace(clock="session", stages=self.pipe.stages))

        self._seq = 0
        self._play_finishes: list[float] = []  # post-warmup chunks, in order
        self._last_play_finish = 0.0
        self._ended = False
        self._warmup_held: list[str] = []  # state events deferred past warmup
        # per-chunk compute scratch, valid between schedule() and message build
        self._cond: Optional[CondBundle] = None
        self._backbone_out: Optional[np.ndarray] = None
        self._final: Optional[np.ndarray] = None
        self._latent_hash = ""
        self._retained: tuple = ()
        self._entries = 0

    # ------------------------------------------------------------------
    # emission

    def _emit(self, msg: dict) -> None:
        msg["seq"] = self._seq
        self._seq += 1
        self.trace.messages.append(msg)
        if self.sink is not None:
            self.sink(msg)

    def _emit_state(self, new: SessionState, boundary: int, t: float, cause: str) -> None:
        old = self.state
        self.state = new
        row = {
            "type": "state",
            "from": old.value,
            "to": new.value,
            "boundary": boundary,
            "cause": cause,
            "t": round(t, 3),
        }
        self.trace.state_history.append(row)
        self._emit(dict(row))

    def _emit_error(self, code: str, message: str, t: float) -> None:
        self._emit({"type": "error", "code": code, "message": message, "t": round(t, 3)})

    # ------------------------------------------------------------------
    # boundary handling

    def _apply_event(self, ev: ControlEvent, boundary: int, t: float) -> None:
        if ev.kind == "text":
            self.refresh.prompt = ev.data["text"]
        elif ev.kind == "audio":
            self.persist.buffers.get(ev.data["stream"]).append(ev.data["samples"], at_ms=ev.at)
        elif ev.kind == "play_ack":
            if self.config.playback == "ack":
                self.gate.ack(int(ev.data["index"]))
        elif ev.kind == "event":
            name = ev.data["name"]
            new = transition(self.state, name)
            if new is not self.state:
                self._emit_state(new, boundary, t, name)
            elif self.state is SessionState.WARMUP:
                # speech markers during warmup take effect once it completes
                self._warmup_held.append(name)
        elif ev.kind == "end":
            if self.state is not SessionState.ENDED:
                self._emit_state(SessionState.ENDED, boundary, t, "end")
        if self.state is SessionState.ENDED:
            self._ended = True

    def _boundary(self, k: int, t: float) -> None:
        """Apply everything that arrived by ``t`` before admitting chunk k."""
        if self.state is SessionState.WARMUP and k >= self.config.warmup_chunks:
            self._emit_state(SessionState.IDLE, k, t, "warmup_complete")
            for name in self._warmup_held:
                new = transition(self.state, name)
                if new is not self.state:
                    self._emit_state(new, k, t, name)
            self._warmup_held.clear()
        for ev in self.feed.poll(t):
            self._apply_event(ev, k, t)

    # ------------------------------------------------------------------
    # conditioning

    def _build_cond(self, k: int, t: float) -> tuple[CondBundle, bool, bool]:
        mute_speak, mute_listen = mute_flags(self.state)
        d_cond = self.config.model.d_cond

        def branch(stream: str, muted: bool) -> tuple[Tensor2D, bool]:
            buf = self.persist.buffers.get(stream)
            win = chunk_audio(buf, k, at_ms=t, strict=self.config.strict_audio)
            if muted:
                return Tensor2D(np.zeros((self.n_frames, d_cond), np.float32)), False
            return Tensor2D(self.audio_enc.encode(win)), win.underrun

        speak, under_agent = branch("agent", mute_speak)
        listen, under_user = branch("user", mute_listen)
        cond = CondBundle(
            text_tokens=Tensor2D(self.text_enc.embed(self.refresh.prompt)),
            speak_frames=speak,
            listen_frames=listen,
            ref_tokens=self.ref_tokens,
            mute_speak=mute_speak,
            mute_listen=mute_listen,
        )
        return cond, under_user, under_agent

    # ------------------------------------------------------------------
    # stage compute (called by the scheduler in dependency order)

    def _stage_work(self, stage: str, k: int) -> None:
        gen = self.persist.gen
        if stage == "generator":
            out, _, _ = generate_backbone(gen, k, self._cond)
            self._backbone_out = out
        elif stage == "refiner":
            final, _ = generate_refiner(gen, k, self._cond, self._backbone_out)
            self._final = final
        else:  # decoder: boundary eviction + latent digest
            gen.caches.evict_for(k, self.config.policy)
            self._latent_hash = array_digest(self._final)
            self._retained = gen.caches.clean.stored_chunks()
            self._entries = gen.caches.clean.entry_count() + gen.caches.noisy.entry_count()

    # ------------------------------------------------------------------
    # admission

    def _play_head_at(self, t: float) -> int:
        """Chunks played by time t: warmup counts once generated, post-warmup
        by playback finish (auto) or received acks (ack mode)."""
        base = min(self.gate.gen_head, self.config.warmup_chunks)
        if self.config.playback == "ack":
            return max(base, self.gate.play_head)
        return base + sum(1 for fin in self._play_finishes if fin <= t)

    def _gate_constraint(self, k: int) -> tuple[Optional[float], bool]:
        """(earliest time the gate admits chunk k, satisfiable). Warmup
        chunks bypass the gate entirely."""
        if k < self.config.warmup_chunks:
            return 0.0, True
        required = k - self.config.lookahead + 1  # play_head needed to admit
        if required <= 0:
            return 0.0, True
        if self.config.playback == "auto":
            post = required - self.config.warmup_chunks
            if post <= 0:
                return 0.0, True
            return self._play_finishes[post - 1], True
        if self.gate.play_head >= required:
            return 0.0, True
        t_ack = self.feed.find_ack_time(required, self.gate.play_head)
        return (t_ack, True) if t_ack is not None else (None, False)

    # ------------------------------------------------------------------
    # main loop (script mode)

    def run(self, n_chunks: int) -> SessionTrace:
        if n_chunks < 0:
            raise ConfigError(f"n_chunks must be >= 0, got {n_chunks}")
        cfg = self.config
        for k in range(n_chunks):
            t_free = self.pipe.generator_free_at()
            gate_t, ok = self._gate_constraint(k)
            if not ok:
                t_end = self.feed.earliest_end_time()
                if t_end is None:
                    self._boundary(k, t_free)
                    if not self._ended:
                        self._emit_error(
                            "gate_stall",
                            f"chunk {k} starved: play_head {self.gate.play_head} "
                            f"< required {k - cfg.lookahead + 1}",
                            t_free,
                        )
                    break
                gate_t = t_end
            a_k = max(t_free, gate_t)
            if self.clock is not None:
                self.clock.sleep_until(a_k)
            self._boundary(k, a_k)
            if self._ended:
                break

            cond, under_user, under_agent = self._build_cond(k, a_k)
            self._cond = cond
            self.trace.gate_log.append(
                {"chunk": k, "t": round(a_k, 3), "gen_head": self.gate.gen_head,
                 "play_head": self._play_head_at(a_k)}
            )

            jobs = self.pipe.schedule(k, a_k)
            self.trace.jobs.jobs.extend(jobs)
            dec_finish = jobs[2].t_finish
            self.gate.gen_head = k + 1

            warmup = k < cfg.warmup_chunks
            if not warmup and cfg.playback == "auto":
                start = max(dec_finish, self._last_play_finish)
                fin = start + cfg.chunk_duration_ms
                self._play_finishes.append(fin)
                self._last_play_finish = fin

            self._emit(
                {
                    "type": "chunk",
                    "index": k,
                    "state": self.state.value,
                    "warmup": warmup,
                    "t": round(dec_finish, 3),
                    "timings": {
                        j.stage: {"start": round(j.t_start, 3), "finish": round(j.t_finish, 3)}
                        for j in jobs
                    },
                    "latent_hash": self._latent_hash,
                    "cond_hash": cond.digest(),
                    "nfe": {"backbone": 2, "refiner": 1},
                    "cache": {"retained": list(self._retained), "entries": self._entries},
                    "underrun": {"user": under_user, "agent": under_agent},
                }
            )
            self.trace.chunks.append(
                ChunkSummary(
                    index=k,
                    state=self.state.value,
                    admit_t=a_k,
                    cond_hash=cond.digest(),
                    latent_hash=self._latent_hash,
                    underrun_user=under_user,
                    underrun_agent=under_agent,
                )
            )

        self._drain_tail()
        self._finish()
        return self.trace

    def _drain_tail(self) -> None:
        """Apply state-bearing events left in the script after the last chunk."""
        if self._ended:
            return
        boundary = len(self.trace.chunks)
        for ev in self.feed.poll(float("inf")):
            if ev.kind in ("event", "end"):
                self._apply_event(ev, boundary, ev.at)
                if self._ended:
                    break

    def _finish(self) -> None:
        base = pipeline_metrics(self.trace.jobs) if self.trace.jobs.jobs else {}
        slack = None
        if self.config.playback == "auto" and self._play_finishes:
            starts = [f - self.config.chunk_duration_ms for f in self._play_finishes]
            fins = [
                j.t_finish
                for j in self.trace.jobs.by_stage("decoder")
                if j.chunk >= self.config.warmup_chunks
            ]
            gaps = [round(s - f, 3) for s, f in zip(starts, fins)]
            slack = {"min": min(gaps), "last": gaps[-1]} if gaps else None
        t_last = max((m["t"] for m in self.trace.messages), default=0.0)
        underruns = sum(
            c.underrun_user or c.underrun_agent for c in self.trace.chunks
        )
        msg = {
            "type": "metrics",
            "t": round(t_last, 3),
            "chunks": len(self.trace.chunks),
            "final_state": self.state.value,
            "transitions": len(self.trace.state_history),
            "max_lookahead": max(
                (g["gen_head"] - g["play_head"] for g in self.trace.gate_log), default=0
            ),
            "underrun_chunks": underruns,
            "playback_slack_ms": slack,
        }
        for key in ("ttfr_ms", "steady_period_ms", "utilization"):
            if key in base:
                msg[key] = base[key]
        self._emit(msg)
        self.trace.messages.sort(key=lambda m: (m["t"], m["seq"]))
        for m in self.trace.messages:
            del m["seq"]
        self.trace.metrics = msg


def load_event_script(path: str, sample_rate: int) -> list[ControlEvent]:
    rows = read_ndjson(path)
    events = [script_row_to_event(r, sample_rate) for r in rows]
    return sorted(events, key=lambda e: e.at)


def apply_grace(events: list[ControlEvent], grace_ms: float) -> list[ControlEvent]:
    """Delay user_speech_end by the grace window (barge-in debounce)."""
    if grace_ms <= 0:
        return list(events)
    out = []
    for ev in events:
        if ev.kind == "event" and ev.data.get("name") == "user_speech_end":
            out.append(replace(ev, at=ev.at + grace_ms))
        else:
            out.append(ev)
    return sorted(out, key=lambda e: e.at)


def run_session(
    config: SessionConfig,
    events: list[ControlEvent],
    n_chunks: int,
    trace_path: Optional[str] = None,
) -> SessionTrace:
    """Run a scripted session to completion and optionally write the trace."""
    feed = ScriptFeed(apply_grace(events, config.speech_end_grace_ms))
    engine = SessionEngine(config, feed)
    trace = engine.run(n_chunks)
    if trace_path:
        trace.write_ndjson(trace_path)
    return trace

"""Audio timeline buffers, chunk-aligned windowing, and stub encoders.

A chunk covers one second of session audio. The window fed to the model for
chunk ``k`` spans seconds ``[k-2, k+1)``: two seconds of history plus the
current second. History before the session start and samples that have not
arrived yet are zero-filled; a missing tail in the *current* second marks
the window as an underrun (silence was inserted where speech may belong).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import AudioUnderrunError, ConfigError

# seconds of context per window: two history + the current second
WINDOW_SECONDS = 3
HISTORY_SECONDS = 2


@dataclass(frozen=True)
class AudioWindow:
    chunk_index: int
    samples: np.ndarray  # float32, WINDOW_SECONDS * sample_rate
    underrun: bool
    history_padded: bool


class AudioBuffer:
    """Append-only sample timeline with arrival times.

    Samples are contiguous from session start; each append records the
    arrival time so a boundary at time ``t`` only sees the prefix that had
    arrived by then. This is what makes conditioning reproducible from a
    script: visibility is a pure function of (appends, boundary time).
    """

    def __init__(self, sample_rate: int):
        if sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {sample_rate}")
        self.sample_rate = int(sample_rate)
        self._chunks: list[np.ndarray] = []
        self._arrivals: list[float] = []  # arrival time (ms) per append
        self._total = 0

    def append(self, samples: np.ndarray | list[float], at_ms: float = 0.0) -> None:
        arr = np.asarray(samples, dtype=np.float32).reshape(-1)
        if self._arrivals and at_ms < self._arrivals[-1]:
            at_ms = self._arrivals[-1]  # arrivals are monotone by construction
        if arr.size == 0:
            return
        self._chunks.append(arr)
        self._arrivals.append(float(at_ms))
        self._total += arr.size

    def __len__(self) -> int:
        return self._total

    def visible_len(self, at_ms: float) -> int:
        """Number of samples that had arrived by ``at_ms``."""
        n = 0
        for arr, t in zip(self._chunks, self._arrivals):
            if t > at_ms:
                break
            n += arr.size
        return n

    def read(self, start: int, stop: int, visible: int | None = None) -> np.ndarray:
        """Samples in [start, stop), zero-filled outside [0, visible)."""
        if visible is None:
            visible = self._total
        out = np.zeros(stop - start, dtype=np.float32)
        lo = max(start, 0)
        hi = min(stop, visible, self._total)
        if hi <= lo:
            return out
        flat = np.concatenate(self._chunks) if self._chunks else np.zeros(0, np.float32)
        out[lo - start : hi - start] = flat[lo:hi]
        return out


def chunk_audio(
    buffer: AudioBuffer,
    chunk_index: int,
    at_ms: float | None = None,
    strict: bool = False,
) -> AudioWindow:
    """Window of seconds [k-2, k+1) for chunk ``k``, zero-padded as needed.

    ``at_ms`` limits visibility to samples arrived by that time (None means
    everything appended so far). ``strict`` raises instead of flagging when
    the current second is incomplete.
    """
    if chunk_index < 0:
        raise ConfigError(f"chunk_index must be >= 0, got {chunk_index}")
    sr = buffer.sample_rate
    start = (chunk_index - HISTORY_SECONDS) * sr
    stop = (chunk_index + 1) * sr
    visible = buffer.visible_len(at_ms) if at_ms is not None else len(buffer)
    samples = buffer.read(start, stop, visible=visible)
    underrun = visible < stop
    if underrun and strict:
        raise AudioUnderrunError(
            f"chunk {chunk_index}: current second needs {stop} samples, "
            f"have {visible}"
        )
    return AudioWindow(
        chunk_index=chunk_index,
        samples=samples,
        underrun=underrun,
        history_padded=start < 0,
    )


class AudioEncoder:
    """Seeded random projection from raw samples to per-frame feature rows.

    Stands in for a learned audio tower: deterministic, shape-correct, and
    linear so tests can reason about it (zero audio encodes to zero frames).
    """

    def __init__(self, d_cond: int, sample_rate: int, audio_fps: float, seed: int):
        spf = sample_rate / audio_fps
        if spf != int(spf) or spf <= 0:
            raise ConfigError(
                f"sample_rate {sample_rate} not divisible by audio_fps {audio_fps}"
            )
        self.samples_per_frame = int(spf)
        self.audio_fps = float(audio_fps)
        self.d_cond = int(d_cond)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11D]))
        self._proj = (
            rng.standard_normal((self.samples_per_frame, d_cond))
            / np.sqrt(self.samples_per_frame)
        ).astype(np.float32)

    def encode(self, window: AudioWindow) -> np.ndarray:
        n = window.samples.size
        if n % self.samples_per_frame:
            raise ConfigError(
                f"window of {n} samples is not a whole number of frames"
            )
        frames = window.samples.reshape(-1, self.samples_per_frame)
        return frames @ self._proj


class TextEncoder:
    """Deterministic prompt embedding: tokens drawn from a prompt-keyed RNG."""

    def __init__(self, d_cond: int, seed: int, n_tokens: int = 4):
        self.d_cond = int(d_cond)
        self.n_tokens = int(n_tokens)
        self._seed = int(seed)

    def embed(self, prompt: str) -> np.ndarray:
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        key = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(np.random.SeedSequence([self._seed, key]))
        return rng.standard_normal((self.n_tokens, self.d_cond)).astype(np.float32)


@dataclass
class StreamBuffers:
    """The two live audio timelines of a duplex session."""

    user: AudioBuffer
    agent: AudioBuffer

    @classmethod
    def fresh(cls, sample_rate: int) -> "StreamBuffers":
        return cls(user=AudioBuffer(sample_rate), agent=AudioBuffer(sample_rate))

    def get(self, stream: str) -> AudioBuffer:
        if stream == "user":
            return self.user
        if stream == "agent":
            return self.agent
        raise ConfigError(f"unknown audio stream {stream!r}")

"""Boolean attention masks: chunk-causal video, windowed context, audio windows.

Layout convention everywhere: video tokens first in ascending chunk order,
reference tokens at the end of the key axis. Video tokens attend
bidirectionally within their chunk, causally across chunks, and always see
references; references see only references (they stay key-only for video).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, MaskError


@dataclass(frozen=True)
class BoolMask:
    """(queries x keys) attendability; True = attendable. Rows never empty."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)
        if m.ndim != 2:
            raise MaskError(f"mask must be 2-D, got ndim={m.ndim}")
        if m.shape[0] and not m.any(axis=1).all():
            bad = int(np.flatnonzero(~m.any(axis=1))[0])
            raise MaskError(f"query row {bad} attends nothing")

    @property
    def rows(self) -> int:
        return self.m.shape[0]

    @property
    def cols(self) -> int:
        return self.m.shape[1]


@dataclass(frozen=True)
class AudioWindowSpec:
    """Symmetric audio attention half-widths, in audio frames."""

    speak_window: float = 3.0
    listen_window: float = 12.0

    def __post_init__(self):
        if not (self.speak_window >= 1):
            raise ConfigError(f"speak_window must be >= 1 frame, got {self.speak_window}")
        if not (self.listen_window > self.speak_window):
            raise ConfigError(
                f"listen_window ({self.listen_window}) must exceed speak_window "
                f"({self.speak_window})"
            )


def _video_ref_mask(chunk_ids: Sequence[int], n_ref_tokens: int) -> BoolMask:
    """Shared builder: rows/cols = [video tokens (given per-token chunk id)][refs]."""
    ids = np.asarray(chunk_ids, dtype=np.int64)
    n_vid = ids.shape[0]
    n = n_vid + n_ref_tokens
    m = np.zeros((n, n), dtype=bool)
    # video -> video: query chunk >= key chunk (bidirectional inside a chunk)
    m[:n_vid, :n_vid] = ids[:, None] >= ids[None, :]
    # video -> refs: always; refs -> refs only
    m[:n_vid, n_vid:] = True
    m[n_vid:, n_vid:] = True
    return BoolMask(m)


def chunk_causal_mask(n_chunks: int, tokens_per_chunk: int, n_ref_tokens: int) -> BoolMask:
    """Full-sequence mask over [chunk 0 .. chunk n-1][reference tokens]."""
    if n_chunks <= 0 or tokens_per_chunk <= 0:
        raise MaskError(
            f"zero-size sequence: n_chunks={n_chunks}, tokens_per_chunk={tokens_per_chunk}"
        )
    if n_ref_tokens < 0:
        raise MaskError(f"n_ref_tokens must be >= 0, got {n_ref_tokens}")
    ids = np.repeat(np.arange(n_chunks), tokens_per_chunk)
    return _video_ref_mask(ids, n_ref_tokens)


def windowed_context_mask(
    retained: Sequence[int], tokens_per_chunk: int, n_ref_tokens: int
) -> BoolMask:
    """chunk_causal_mask restricted to the retained chunks (ascending order).

    Absent chunks contribute no key columns; causality is judged on the
    original chunk indices.
    """
    kept = sorted(set(int(c) for c in retained))
    if not kept:
        raise MaskError("retained set is empty")
    if kept[0] < 0:
        raise MaskError(f"negative chunk index {kept[0]} in retained set")
    if tokens_per_chunk <= 0:
        raise MaskError(f"tokens_per_chunk must be > 0, got {tokens_per_chunk}")
    ids = np.repeat(np.asarray(kept, dtype=np.int64), tokens_per_chunk)
    return _video_ref_mask(ids, n_ref_tokens)


def audio_window_mask(
    n_video_tokens: int,
    video_tokens_per_sec: float,
    n_audio_frames: int,
    audio_fps: float,
    window: float,
    token_offset_sec: float = 0.0,
) -> BoolMask:
    """Video token i attends audio frame j iff |j/audio_fps - i/rate| <= window/audio_fps.

    window = inf attends everything. A token whose window catches no frame
    gets its nearest frame instead, so rows are never empty. token_offset_sec
    shifts the video tokens along the audio timeline (current-second tokens
    sit 2 s into their 3-s window).
    """
    if n_video_tokens <= 0 or n_audio_frames <= 0:
        raise MaskError(
            f"empty mask: n_video_tokens={n_video_tokens}, n_audio_frames={n_audio_frames}"
        )
    if video_tokens_per_sec <= 0 or audio_fps <= 0:
        raise MaskError("rates must be positive")
    if not (window >= 0):
        raise MaskError(f"window must be >= 0 or inf, got {window}")
    tok_t = token_offset_sec + np.arange(n_video_tokens, dtype=np.float64) / video_tokens_per_sec
    frm_t = np.arange(n_audio_frames, dtype=np.float64) / audio_fps
    if math.isinf(window):
        return BoolMask(np.ones((n_video_tokens, n_audio_frames), dtype=bool))
    gap = np.abs(frm_t[None, :] - tok_t[:, None])
    m = gap <= (window / audio_fps) + 1e-12
    empty = ~m.any(axis=1)
    if empty.any():
        nearest = gap[empty].argmin(axis=1)
        m[np.flatnonzero(empty), nearest] = True
    return BoolMask(m)

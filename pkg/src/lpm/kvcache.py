"""Pre-RoPE KV cache: hybrid sink + sliding-window retention per layer.

Keys live in the cache un-rotated; every window assembly re-applies the
rotary embedding at window-local positions (sink chunks keep their original
absolute slots, everything else is renumbered contiguously after the sinks).
Noisy-history and clean-history entries live in separate stores that never
cross-contaminate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CacheContractError, CacheMissError, ShapeError
from .latcore import Tensor2D, TokenSpan, validate_spans
from .maskgen import BoolMask, windowed_context_mask
from .ropekit import Position3, RopeParams, reapply_positions

VARIANTS = ("noisy", "clean")


@dataclass(frozen=True)
class RetentionPolicy:
    """sink_chunks anchors + recent_chunks sliding window (current included)."""

    sink_chunks: int = 3
    recent_chunks: int = 2

    def __post_init__(self):
        if self.sink_chunks < 0:
            raise ValueError(f"sink_chunks must be >= 0, got {self.sink_chunks}")
        if self.recent_chunks < 1:
            raise ValueError(f"recent_chunks must be >= 1, got {self.recent_chunks}")


def retained_set(current_index: int, policy: RetentionPolicy) -> Tuple[int, ...]:
    """Chunks kept while generating current_index, ascending."""
    if current_index < 0:
        raise ValueError(f"current_index must be >= 0, got {current_index}")
    kept = set(range(0, min(policy.sink_chunks, current_index + 1)))
    kept |= set(range(max(0, current_index - policy.recent_chunks + 1), current_index + 1))
    return tuple(sorted(kept))


def window_slots(current_index: int, policy: RetentionPolicy) -> Dict[int, int]:
    """Window-local chunk slots: sinks frozen at their absolute index,
    non-sink retained chunks renumbered contiguously after the sinks."""
    kept = retained_set(current_index, policy)
    slots: Dict[int, int] = {}
    rank = 0
    for c in kept:
        if c < policy.sink_chunks:
            slots[c] = c
        else:
            slots[c] = policy.sink_chunks + rank
            rank += 1
    return slots


def chunk_positions(slot: int, tokens_per_chunk: int) -> List[Position3]:
    """Per-token temporal positions for a chunk sitting at a window slot."""
    return [Position3(slot * tokens_per_chunk + j) for j in range(tokens_per_chunk)]


def current_positions(
    current_index: int, policy: RetentionPolicy, tokens_per_chunk: int
) -> List[Position3]:
    return chunk_positions(window_slots(current_index, policy)[current_index], tokens_per_chunk)


@dataclass(frozen=True)
class KvEntry:
    """One chunk's pre-RoPE keys and values at one layer, one history variant."""

    chunk_index: int
    layer: int
    variant: str
    kind: str
    k_pre: Tensor2D
    v: Tensor2D

    def __post_init__(self):
        if self.chunk_index < 0:
            raise ValueError(f"chunk_index must be >= 0, got {self.chunk_index}")
        if self.layer < 0:
            raise ValueError(f"layer must be >= 0, got {self.layer}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kind not in ("video", "sink"):
            raise ValueError(f"chunk entry kind must be video or sink, got {self.kind!r}")
        if self.k_pre.rows != self.v.rows:
            raise ShapeError(
                f"k/v row mismatch: {self.k_pre.rows} vs {self.v.rows}"
            )


@dataclass(frozen=True)
class KvExport:
    """Per-layer pre-RoPE (K, V) captured from one forward pass of one token block."""

    k_pre: Tuple[np.ndarray, ...]
    v: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.k_pre) != len(self.v):
            raise ShapeError("k/v layer count mismatch")

    @property
    def n_layers(self) -> int:
        return len(self.k_pre)

    def entries(
        self, chunk_index: int, variant: str, policy: RetentionPolicy
    ) -> List[KvEntry]:
        kind = "sink" if chunk_index < policy.sink_chunks else "video"
        return [
            KvEntry(chunk_index, layer, variant, kind, Tensor2D(k), Tensor2D(v))
            for layer, (k, v) in enumerate(zip(self.k_pre, self.v))
        ]


@dataclass(frozen=True)
class LayerWindow:
    """Assembled per-layer window: rotated keys + values, video then refs."""

    k_video: np.ndarray
    v_video: np.ndarray
    k_ref: Optional[np.ndarray]
    v_ref: Optional[np.ndarray]


@dataclass(frozen=True)
class AssembledWindow:
    variant: str
    current_index: int
    include_current: bool
    chunk_order: Tuple[int, ...]
    slots: Dict[int, int]
    layers: Tuple[LayerWindow, ...]
    video_positions: Tuple[Position3, ...]
    ref_positions: Tuple[Position3, ...]
    spans: Tuple[TokenSpan, ...]
    tokens_per_chunk: int

    @property
    def n_video_tokens(self) -> int:
        return len(self.video_positions)

    @property
    def n_ref_tokens(self) -> int:
        return len(self.ref_positions)

    def full_mask(self) -> BoolMask:
        """Windowed mask over [retained video incl. current][refs]; only
        meaningful when the current chunk was included."""
        return windowed_context_mask(self.chunk_order, self.tokens_per_chunk, self.n_ref_tokens)


def rotate_heads(
    x: np.ndarray, positions: Sequence[Position3], rope: RopeParams
) -> np.ndarray:
    """Apply rope per attention head of full-width (n, n_heads*head_dim) rows."""
    x = np.asarray(x, dtype=np.float32)
    n, d = x.shape
    if d % rope.head_dim:
        raise ShapeError(f"width {d} is not a multiple of head_dim {rope.head_dim}")
    heads = d // rope.head_dim
    flat = x.reshape(n * heads, rope.head_dim)
    pos = [p for p in positions for _ in range(heads)]
    return np.asarray(reapply_positions(flat, pos, rope)).reshape(n, d)


class KvStore:
    """Single-variant pre-RoPE KV store for one session and one model."""

    def __init__(self, variant: str, n_layers: int):
        if variant not in VARIANTS:
            raise CacheContractError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if n_layers <= 0:
            raise ValueError(f"n_layers must be > 0, got {n_layers}")
        self.variant = variant
        self.n_layers = n_layers
        self._chunks: Dict[Tuple[int, int], KvEntry] = {}
        self._ref: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None
        self._ref_positions: Tuple[Position3, ...] = ()
        self.high_water_entries = 0

    # -- mutation ---------------------------------------------------------

    def insert(self, entry: KvEntry) -> None:
        if entry.variant != self.variant:
            raise CacheContractError(
                f"variant mismatch: store is {self.variant!r}, entry is {entry.variant!r}"
            )
        if entry.layer >= self.n_layers:
            raise CacheContractError(f"layer {entry.layer} >= n_layers {self.n_layers}")
        key = (entry.chunk_index, entry.layer)
        if key in self._chunks:
            raise CacheContractError(f"duplicate insert for chunk {key[0]} layer {key[1]}")
        self._chunks[key] = entry
        self.high_water_entries = max(self.high_water_entries, len(self._chunks))

    def insert_chunk(self, chunk_index: int, export: KvExport, policy: RetentionPolicy) -> None:
        if export.n_layers != self.n_layers:
            raise CacheContractError(
                f"export has {export.n_layers} layers, store expects {self.n_layers}"
            )
        for entry in export.entries(chunk_index, self.variant, policy):
            self.insert(entry)

    def insert_reference(self, export: KvExport, positions: Sequence[Position3]) -> None:
        if self._ref is not None:
            raise CacheContractError("reference entries already inserted")
        if export.n_layers != self.n_layers:
            raise CacheContractError("reference export layer count mismatch")
        for k, v in zip(export.k_pre, export.v):
            if k.shape[0] != len(positions):
                raise ShapeError(
                    f"reference rows {k.shape[0]} != positions {len(positions)}"
                )
        self._ref = [
            (np.asarray(k, dtype=np.float32), np.asarray(v, dtype=np.float32))
            for k, v in zip(export.k_pre, export.v)
        ]
        self._ref_positions = tuple(positions)

    def evict_for(self, current_index: int, policy: RetentionPolicy) -> int:
        """Drop chunk entries outside retained_set(current_index); refs persist."""
        kept = set(retained_set(current_index, policy))
        dead = [key for key in self._chunks if key[0] not in kept]
        for key in dead:
            del self._chunks[key]
        return len(dead)

    # -- inspection -------------------------------------------------------

    def has_chunk(self, chunk_index: int) -> bool:
        return (chunk_index, 0) in self._chunks

    def stored_chunks(self) -> Tuple[int, ...]:
        return tuple(sorted({c for c, _ in self._chunks}))

    def entry_count(self) -> int:
        return len(self._chunks)

    def token_count(self) -> int:
        return sum(e.k_pre.rows for e in self._chunks.values())

    @property
    def n_ref_tokens(self) -> int:
        return len(self._ref_positions)

    # -- assembly ---------------------------------------------------------

    def assemble_window(
        self,
        current_index: int,
        policy: RetentionPolicy,
        rope: RopeParams,
        tokens_per_chunk: int,
        include_current: bool = True,
    ) -> AssembledWindow:
        kept = retained_set(current_index, policy)
        slots = window_slots(current_index, policy)
        wanted = [c for c in kept if include_current or c != current_index]

        for c in wanted:
            for layer in range(self.n_layers):
                if (c, layer) not in self._chunks:
                    raise CacheMissError(
                        f"{self.variant} cache missing chunk {c} layer {layer} "
                        f"while assembling window for {current_index}"
                    )

        video_positions: List[Position3] = []
        spans: List[TokenSpan] = []
        for c in wanted:
            start = len(video_positions)
            video_positions.extend(chunk_positions(slots[c], tokens_per_chunk))
            kind = "sink" if c < policy.sink_chunks else "video"
            spans.append(TokenSpan(kind, start, len(video_positions), chunk_index=c))

        layers: List[LayerWindow] = []
        for layer in range(self.n_layers):
            if wanted:
                k_pre = np.concatenate(
                    [self._chunks[(c, layer)].k_pre.a for c in wanted], axis=0
                )
                v = np.concatenate([self._chunks[(c, layer)].v.a for c in wanted], axis=0)
                k_rot = rotate_heads(k_pre, video_positions, rope)
            else:
                k_rot = np.zeros((0, 0), dtype=np.float32)
                v = np.zeros((0, 0), dtype=np.float32)
            if self._ref is not None:
                rk, rv = self._ref[layer]
                k_ref = rotate_heads(rk, self._ref_positions, rope)
                v_ref = rv
            else:
                k_ref = v_ref = None
            layers.append(LayerWindow(k_rot, v, k_ref, v_ref))

        n_vid = len(video_positions)
        if self._ref_positions:
            spans.append(TokenSpan("reference", n_vid, n_vid + len(self._ref_positions)))
        validate_spans(spans, n_vid + len(self._ref_positions))

        return AssembledWindow(
            variant=self.variant,
            current_index=current_index,
            include_current=include_current,
            chunk_order=tuple(wanted),
            slots=slots,
            layers=tuple(layers),
            video_positions=tuple(video_positions),
            ref_positions=self._ref_positions,
            spans=tuple(spans),
            tokens_per_chunk=tokens_per_chunk,
        )

    # -- snapshot ---------------------------------------------------------

    def snapshot(self, path: str | Path) -> None:
        """Debug dump: <path>.json index + <path>.bin little-endian f32 blob."""
        path = Path(path)
        index = {"variant": self.variant, "n_layers": self.n_layers, "entries": []}
        blob = bytearray()

        def put(a: np.ndarray) -> Tuple[int, int]:
            raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
            off = len(blob)
            blob.extend(raw)
            return off, len(raw)

        for (c, layer), e in sorted(self._chunks.items()):
            ko, kn = put(e.k_pre.a)
            vo, vn = put(e.v.a)
            index["entries"].append(
                {
                    "chunk": c,
                    "layer": layer,
                    "kind": e.kind,
                    "k": {"offset": ko, "nbytes": kn, "shape": list(e.k_pre.a.shape)},
                    "v": {"offset": vo, "nbytes": vn, "shape": list(e.v.a.shape)},
                }
            )
        if self._ref is not None:
            refs = []
            for layer, (k, v) in enumerate(self._ref):
                ko, kn = put(k)
                vo, vn = put(v)
                refs.append(
                    {
                        "layer": layer,
                        "k": {"offset": ko, "nbytes": kn, "shape": list(k.shape)},
                        "v": {"offset": vo, "nbytes": vn, "shape": list(v.shape)},
                    }
                )
            index["references"] = {
                "positions": [list(p) for p in self._ref_positions],
                "layers": refs,
            }
        with open(path.with_suffix(".json"), "w") as f:
            json.dump(index, f, indent=1, sort_keys=True)
        with open(path.with_suffix(".bin"), "wb") as f:
            f.write(bytes(blob))


@dataclass
class CachePair:
    """The two history stores a session carries: backbone noisy, refiner clean."""

    noisy: KvStore
    clean: KvStore

    @classmethod
    def fresh(cls, n_layers: int) -> "CachePair":
        return cls(KvStore("noisy", n_layers), KvStore("clean", n_layers))

    def evict_for(self, current_index: int, policy: RetentionPolicy) -> None:
        self.noisy.evict_for(current_index, policy)
        self.clean.evict_for(current_index, policy)

    def entry_count(self) -> int:
        return self.noisy.entry_count() + self.clean.entry_count()

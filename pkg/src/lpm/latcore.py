"""Dense float32 kernel and the latent/token data model everything builds on.

Arrays are stored row-major float32 and are immutable once wrapped; ops
return new tensors. Softmax accumulates its row sums in float64 before the
divide so row sums stay within 1e-6 even for wide rows, but all stored
values remain float32.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DegenerateRowError, ShapeError

EPS = 1e-6

ArrayLike = Union["Tensor2D", np.ndarray, Sequence[Sequence[float]]]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Tensor2D:
    """Immutable 2-D float32 matrix with row-major data."""

    __slots__ = ("_a",)

    def __init__(self, values: ArrayLike):
        if isinstance(values, Tensor2D):
            self._a = values._a
            return
        a = np.asarray(values, dtype=np.float32)
        if a.ndim != 2:
            raise ShapeError(f"Tensor2D needs 2-D data, got ndim={a.ndim}")
        if a.size and not np.all(np.isfinite(a)):
            raise ValueError("Tensor2D rejects non-finite values")
        self._a = _freeze(a)

    @property
    def a(self) -> np.ndarray:
        """Read-only float32 ndarray view."""
        return self._a

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view; len == rows * cols."""
        return self._a.reshape(-1)

    def digest(self) -> str:
        return hashlib.sha256(self._a.tobytes()).hexdigest()[:16]

    def __repr__(self) -> str:
        return f"Tensor2D({self.rows}x{self.cols})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor2D):
            return NotImplemented
        return self._a.shape == other._a.shape and bool(np.array_equal(self._a, other._a))

    def __hash__(self):
        return hash((self._a.shape, self._a.tobytes()))


def tensor(values: ArrayLike) -> Tensor2D:
    return values if isinstance(values, Tensor2D) else Tensor2D(values)


def as_array(values: ArrayLike) -> np.ndarray:
    """float32 ndarray from a Tensor2D or array-like, validated 2-D finite."""
    return tensor(values).a


@dataclass(frozen=True)
class LatentChunk:
    """One chunk of latent video tokens at a known noise level."""

    chunk_index: int
    tokens: Tensor2D
    timestep: float

    def __post_init__(self):
        if self.chunk_index < 0:
            raise ValueError(f"chunk_index must be >= 0, got {self.chunk_index}")
        if not (0.0 <= self.timestep <= 1.0):
            raise ValueError(f"timestep must lie in [0, 1], got {self.timestep}")


# Token span kinds label contiguous regions of an attention sequence.
SPAN_KINDS = ("video", "reference", "sink")


@dataclass(frozen=True)
class TokenSpan:
    """Half-open [start, stop) region of a token sequence."""

    kind: str
    start: int
    stop: int
    chunk_index: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SPAN_KINDS:
            raise ValueError(f"unknown span kind {self.kind!r}")
        if not (0 <= self.start < self.stop):
            raise ValueError(f"bad span bounds [{self.start}, {self.stop})")

    def __len__(self) -> int:
        return self.stop - self.start


def validate_spans(spans: Sequence[TokenSpan], length: int) -> None:
    """Spans must partition [0, length) without gaps or overlap."""
    pos = 0
    for s in spans:
        if s.start != pos:
            raise ValueError(f"span gap/overlap at {pos}: next span starts at {s.start}")
        pos = s.stop
    if pos != length:
        raise ValueError(f"spans cover [0, {pos}) but sequence has length {length}")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor2D:
    """Row-major float32 matrix product."""
    x, y = as_array(a), as_array(b)
    if x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {x.shape} @ {y.shape}")
    return Tensor2D(x @ y)


def softmax_rows(m: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor2D:
    """Row-wise softmax; masked-out entries are exactly 0 in the output.

    mask is boolean (True = attendable) and must leave every row at least
    one entry, else DegenerateRowError.
    """
    x = as_array(m).astype(np.float32)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != matrix shape {x.shape}")
        if x.shape[0] and not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise DegenerateRowError(f"row {bad} is fully masked")
        x = np.where(mask, x, -np.inf)
    elif x.shape[1] == 0:
        raise DegenerateRowError("rows have zero width")
    hi = x.max(axis=1, keepdims=True)
    e = np.exp(x - hi, dtype=np.float32)
    denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
    return Tensor2D((e / denom).astype(np.float32))


def rmsnorm(v: Sequence[float], gain: Sequence[float]) -> np.ndarray:
    """out_i = gain_i * v_i / sqrt(mean(v^2) + EPS), float32."""
    x = np.asarray(v, dtype=np.float32).reshape(-1)
    g = np.asarray(gain, dtype=np.float32).reshape(-1)
    if x.shape != g.shape:
        raise ShapeError(f"rmsnorm gain length {g.shape[0]} != vector length {x.shape[0]}")
    if x.size == 0:
        raise ShapeError("rmsnorm of empty vector")
    ms = np.mean(np.square(x, dtype=np.float32), dtype=np.float32)
    return (g * x / np.sqrt(ms + np.float32(EPS))).astype(np.float32)


def rmsnorm_rows(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Row-wise rmsnorm over the last axis; float32 in/out."""
    x = np.asarray(x, dtype=np.float32)
    g = np.asarray(gain, dtype=np.float32)
    if x.shape[-1] != g.shape[-1]:
        raise ShapeError(f"gain length {g.shape[-1]} != row width {x.shape[-1]}")
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=np.float32)
    return (x * g / np.sqrt(ms + np.float32(EPS))).astype(np.float32)


def array_digest(a: np.ndarray) -> str:
    """Stable 16-hex content hash of an ndarray's bytes."""
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]

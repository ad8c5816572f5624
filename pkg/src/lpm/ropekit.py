"""Three-axis rotary position embedding with segment offsets for references.

Keys are stored un-rotated elsewhere; this module is the single place that
turns (vector, position) into a rotated vector, so cached keys can be
re-rotated at new window positions. Angles and trig run in float64
internally (offset positions in the 10^4 range would lose ~1e-3 to float32
argument reduction); outputs are float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .latcore import Tensor2D


class Position3(NamedTuple):
    """(temporal, height, width) token position."""

    t: int
    h: int = 0
    w: int = 0


@dataclass(frozen=True)
class RopeParams:
    """Rotation geometry: which dims rotate on which axis, and the base."""

    head_dim: int
    base: float = 10000.0
    axes: Tuple[int, int, int] = None  # (t_dim, h_dim, w_dim); default (head_dim, 0, 0)

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"head_dim must be positive even, got {self.head_dim}")
        if self.base <= 1.0:
            raise ConfigError(f"rope base must exceed 1, got {self.base}")
        axes = self.axes if self.axes is not None else (self.head_dim, 0, 0)
        object.__setattr__(self, "axes", tuple(int(d) for d in axes))
        if len(self.axes) != 3 or any(d < 0 or d % 2 for d in self.axes):
            raise ConfigError(f"axes must be three even non-negative dims, got {self.axes}")
        if sum(self.axes) != self.head_dim:
            raise ConfigError(f"axes {self.axes} do not sum to head_dim {self.head_dim}")


def _positions_array(positions: Sequence[Position3], n: int) -> np.ndarray:
    pos = np.asarray([(p[0], p[1], p[2]) for p in positions], dtype=np.float64)
    pos = pos.reshape(len(positions), 3)  # empty list arrives as shape (0,)
    if pos.shape != (n, 3):
        raise ShapeError(f"need {n} positions, got shape {pos.shape}")
    return pos


def apply_rope(
    x: Union[Tensor2D, np.ndarray],
    positions: Sequence[Position3],
    params: RopeParams,
) -> Union[Tensor2D, np.ndarray]:
    """Rotate per-token head vectors at the given 3-axis positions.

    Within each axis segment, consecutive (even, odd) element pairs form a
    2-D rotation at angle position * base^(-2k/axis_dim). Norm-preserving;
    inner products depend only on per-axis position differences.
    """
    wrapped = isinstance(x, Tensor2D)
    a = x.a if wrapped else np.asarray(x, dtype=np.float32)
    if a.ndim != 2 or a.shape[1] != params.head_dim:
        raise ShapeError(f"expected (n, {params.head_dim}) vectors, got {a.shape}")
    pos = _positions_array(positions, a.shape[0])

    out = a.astype(np.float64)
    start = 0
    for axis, dim in enumerate(params.axes):
        if dim == 0:
            continue
        inv_freq = params.base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
        theta = pos[:, axis : axis + 1] * inv_freq[None, :]
        cos, sin = np.cos(theta), np.sin(theta)
        seg = out[:, start : start + dim]
        even, odd = seg[:, 0::2].copy(), seg[:, 1::2].copy()
        seg[:, 0::2] = even * cos - odd * sin
        seg[:, 1::2] = even * sin + odd * cos
        start += dim
    res = out.astype(np.float32)
    return Tensor2D(res) if wrapped else res


@dataclass(frozen=True)
class SegmentOffsets:
    """Per-reference-type base offsets and per-sub-type sub offsets.

    table maps ref_type -> (base_offset, sub_count); sub offset of index j
    is sub_step * j with 1-based j up to sub_count.
    """

    table: Dict[str, Tuple[int, int]] = field(
        default_factory=lambda: {"expression": (10000, 8), "view": (20000, 4)}
    )
    sub_step: int = 100

    def offset(self, ref_type: str, sub_index: int) -> int:
        if ref_type not in self.table:
            raise ConfigError(f"unknown reference type {ref_type!r}")
        base, count = self.table[ref_type]
        if not (1 <= sub_index <= count):
            raise ConfigError(
                f"sub_index {sub_index} out of range 1..{count} for {ref_type!r}"
            )
        return base + self.sub_step * sub_index

    def all_offsets(self) -> Dict[Tuple[str, int], int]:
        return {
            (rt, j): base + self.sub_step * j
            for rt, (base, count) in self.table.items()
            for j in range(1, count + 1)
        }

    def validate(self, max_video_t: int) -> None:
        """All (type, sub) offsets distinct and beyond the video range."""
        offs = self.all_offsets()
        seen: Dict[int, Tuple[str, int]] = {}
        for key, off in offs.items():
            if off in seen:
                raise ConfigError(f"offset collision: {key} and {seen[off]} both map to {off}")
            seen[off] = key
            if off < max_video_t:
                raise ConfigError(
                    f"offset {off} for {key} falls inside the video range (< {max_video_t})"
                )


def ref_position(
    video_t_len: int,
    ref_type: str,
    sub_index: int,
    offs: SegmentOffsets,
    h: int = 0,
    w: int = 0,
) -> Position3:
    """Temporal slot for a reference token: past the video axis by its segment offset."""
    if video_t_len < 0:
        raise ConfigError(f"video_t_len must be >= 0, got {video_t_len}")
    return Position3(video_t_len + offs.offset(ref_type, sub_index), h, w)


def reapply_positions(
    pre_rope_k: Union[Tensor2D, np.ndarray],
    new_positions: Sequence[Position3],
    params: RopeParams,
) -> Union[Tensor2D, np.ndarray]:
    """Rotate stored un-rotated keys at fresh positions.

    Identical to apply_rope by construction; the separate name marks the
    cache re-rotation call sites.
    """
    return apply_rope(pre_rope_k, new_positions, params)

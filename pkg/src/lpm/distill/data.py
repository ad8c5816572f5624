"""Teacher trajectory datasets via deterministic PF-ODE integration.

Each sequence is L chunks; chunk l starts from a fresh Gaussian draw at
t=1 and is integrated down to 0 with Euler steps on the analytic velocity,
conditioned on chunk l-1's clean endpoint. States are recorded at the
inference schedule levels {T0, T1, T2, 0} so later stages can read off
exactly the inputs the streaming model would see.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from ..denoise import TimestepSchedule
from ..errors import ConfigError
from .teacher import MixtureTeacher


@dataclass(frozen=True)
class TrajectoryDataset:
    """States (N, L, d) per recorded level, plus each chunk's clean prev."""

    levels: tuple  # recorded t values, descending, last is 0.0
    states: Dict[float, np.ndarray]
    prev: np.ndarray  # (N, L, d): clean previous chunk (zeros for l=0)
    lineage: str  # provenance tag checked by the training stages

    @property
    def n_seqs(self) -> int:
        return self.prev.shape[0]

    @property
    def seq_len(self) -> int:
        return self.prev.shape[1]

    @property
    def dim(self) -> int:
        return self.prev.shape[2]

    def clean(self) -> np.ndarray:
        return self.states[0.0]

    def flat(self, level: float) -> np.ndarray:
        """(N*L, d) view of one level, paired with flat_prev()."""
        return self.states[level].reshape(-1, self.dim)

    def flat_prev(self) -> np.ndarray:
        return self.prev.reshape(-1, self.dim)


def ode_integrate(
    teacher: MixtureTeacher,
    x: np.ndarray,
    prev: np.ndarray,
    t_from: float,
    t_to: float,
    substeps: int,
) -> np.ndarray:
    """Euler integration of dx/dt = v(x, t) from t_from down to t_to."""
    if not 0.0 <= t_to < t_from <= 1.0:
        raise ConfigError(f"need 0 <= t_to < t_from <= 1, got {t_from} -> {t_to}")
    if substeps <= 0:
        raise ConfigError(f"substeps must be positive, got {substeps}")
    x = np.asarray(x, dtype=np.float64).copy()
    dt = (t_to - t_from) / substeps
    t = t_from
    for _ in range(substeps):
        x += dt * teacher.velocity(x, t, prev)
        t += dt
    return x


def teacher_ode_rollout(
    teacher: MixtureTeacher,
    n_seqs: int,
    seq_len: int,
    sched: TimestepSchedule,
    seed: int,
    substeps: int = 40,
    extra_levels: Sequence[float] = (),
) -> TrajectoryDataset:
    """Integrate N x L chunks, recording states at {1, T0, T1, T2, 0}."""
    if n_seqs <= 0 or seq_len <= 0:
        raise ConfigError("n_seqs and seq_len must be positive")
    levels = sorted({1.0, sched.T0, sched.T1, sched.T2, 0.0, *extra_levels}, reverse=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0DE]))
    d = teacher.dim

    states = {lv: np.empty((n_seqs, seq_len, d)) for lv in levels}
    prev_all = np.empty((n_seqs, seq_len, d))
    prev = np.zeros((n_seqs, d))
    for chunk in range(seq_len):
        prev_all[:, chunk] = prev
        x = rng.standard_normal((n_seqs, d))
        states[levels[0]][:, chunk] = x
        for hi, lo in zip(levels, levels[1:]):
            x = ode_integrate(teacher, x, prev, hi, lo, substeps)
            states[lo][:, chunk] = x
        prev = states[0.0][:, chunk]

    lineage = f"teacher:{teacher.digest()}:seed={seed}:n={n_seqs}:l={seq_len}"
    return TrajectoryDataset(
        levels=tuple(levels), states=states, prev=prev_all, lineage=lineage
    )

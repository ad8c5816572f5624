"""Analytic autoregressive Gaussian-mixture teacher.

Each chunk is a point in R^d drawn from a K-component mixture whose means
depend linearly on the previous chunk's clean value:

    mu_k(prev) = base_k + A @ prev,   shared isotropic sigma^2.

Under the rectified-flow corruption x_t = (1-t) x0 + t eps the marginal at
level t is again a mixture, with means (1-t) mu_k and per-component
variance s_t^2 = (1-t)^2 sigma^2 + t^2, so the score, the posterior over
components, and the probability-flow velocity are all available in closed
form. Everything here is float64: this module is the numerical ground
truth the rest of the lab is validated against.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import hashlib

import numpy as np

from ..errors import ConfigError


def _as_batch(x: np.ndarray, d: int) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != d:
        raise ConfigError(f"expected (*, {d}) points, got {a.shape}")
    return a


def _t_col(t, n: int) -> np.ndarray:
    """Timestep as an (n, 1) float64 column, validated to [0, 1]."""
    a = np.asarray(t, dtype=np.float64).reshape(-1)
    if a.size == 1:
        a = np.full(n, a[0])
    if a.size != n:
        raise ConfigError(f"need 1 or {n} timesteps, got {a.size}")
    if (a < 0).any() or (a > 1).any():
        raise ConfigError("timesteps must lie in [0, 1]")
    return a[:, None]


@dataclass(frozen=True)
class MixtureTeacher:
    weights: np.ndarray  # (K,)
    base: np.ndarray  # (K, d)
    coupling: np.ndarray  # (d, d), the autoregressive A
    sigma: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.base, dtype=np.float64)
        a = np.asarray(self.coupling, dtype=np.float64)
        if w.ndim != 1 or b.ndim != 2 or w.shape[0] != b.shape[0]:
            raise ConfigError("weights (K,) must match base (K, d)")
        if (w <= 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be positive and sum to 1")
        if a.shape != (b.shape[1], b.shape[1]):
            raise ConfigError("coupling must be (d, d)")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "base", b)
        object.__setattr__(self, "coupling", a)

    @property
    def n_modes(self) -> int:
        return self.base.shape[0]

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.weights, self.base, self.coupling, np.float64(self.sigma)):
            h.update(np.asarray(arr).tobytes())
        return h.hexdigest()[:16]

    # ------------------------------------------------------------------
    # clean distribution

    def means(self, prev: np.ndarray) -> np.ndarray:
        """Conditional component means, (K, B, d)."""
        prev = _as_batch(prev, self.dim)
        return self.base[:, None, :] + prev @ self.coupling.T

    def sample(self, prev: np.ndarray, rng: np.random.Generator):
        """Draw one clean chunk per row of prev; returns (x0, mode_ids)."""
        prev = _as_batch(prev, self.dim)
        n = prev.shape[0]
        modes = rng.choice(self.n_modes, size=n, p=self.weights)
        mu = self.means(prev)[modes, np.arange(n)]
        return mu + self.sigma * rng.standard_normal((n, self.dim)), modes

    # ------------------------------------------------------------------
    # corrupted mixture at level t

    def _component_stats(self, t_col: np.ndarray, prev: np.ndarray):
        """Means (K, B, d) and variance (B, 1) of the level-t mixture."""
        m = (1.0 - t_col) * self.means(prev)
        s2 = (1.0 - t_col) ** 2 * self.sigma**2 + t_col**2
        return m, s2

    def _log_components(self, x: np.ndarray, t_col: np.ndarray, prev: np.ndarray):
        """log w_k + log N(x; m_k, s2 I) as (K, B), plus (m, s2)."""
        x = _as_batch(x, self.dim)
        m, s2 = self._component_stats(t_col, prev)
        diff = x[None, :, :] - m
        quad = (diff**2).sum(axis=2) / s2[:, 0]
        log_norm = -0.5 * self.dim * np.log(2.0 * np.pi * s2[:, 0])
        return np.log(self.weights)[:, None] + log_norm - 0.5 * quad, m, s2

    def log_density(self, x: np.ndarray, t, prev: np.ndarray) -> np.ndarray:
        x = _as_batch(x, self.dim)
        tc = _t_col(t, x.shape[0])
        logs, _, _ = self._log_components(x, tc, prev)
        peak = logs.max(axis=0)
        return peak + np.log(np.exp(logs - peak).sum(axis=0))

    def posterior(self, x: np.ndarray, t, prev: np.ndarray) -> np.ndarray:
        """Component responsibilities gamma_k(x), (K, B)."""
        x = _as_batch(x, self.dim)
        tc = _t_col(t, x.shape[0])
        logs, _, _ = self._log_components(x, tc, prev)
        logs -= logs.max(axis=0, keepdims=True)
        g = np.exp(logs)
        return g / g.sum(axis=0, keepdims=True)

    def score(self, x: np.ndarray, t, prev: np.ndarray) -> np.ndarray:
        """grad_x log p_t(x | prev), (B, d)."""
        x = _as_batch(x, self.dim)
        tc = _t_col(t, x.shape[0])
        logs, m, s2 = self._log_components(x, tc, prev)
        logs -= logs.max(axis=0, keepdims=True)
        g = np.exp(logs)
        g /= g.sum(axis=0, keepdims=True)
        return (g[:, :, None] * (m - x[None, :, :])).sum(axis=0) / s2

    def velocity(self, x: np.ndarray, t, prev: np.ndarray) -> np.ndarray:
        """Probability-flow velocity E[eps - x0 | x_t = x], (B, d).

        Per component the pair (x0, eps) is jointly Gaussian with x_t, so
        the conditional expectations are linear in (x - m_k); mixing them
        with the responsibilities gives the exact marginal velocity with no
        1/(1-t) singularity at either end.
        """
        x = _as_batch(x, self.dim)
        tc = _t_col(t, x.shape[0])
        logs, m, s2 = self._log_components(x, tc, prev)
        logs -= logs.max(axis=0, keepdims=True)
        g = np.exp(logs)
        g /= g.sum(axis=0, keepdims=True)
        mu = self.means(prev)
        diff = x[None, :, :] - m
        # E[x0 | x, k] = mu_k + (1-t) sigma^2 / s2 * (x - m_k)
        # E[eps | x, k] = t / s2 * (x - m_k)
        coef_x0 = (1.0 - tc) * self.sigma**2 / s2
        coef_eps = tc / s2
        v_k = coef_eps[None, :, :] * diff - (mu + coef_x0[None, :, :] * diff)
        return (g[:, :, None] * v_k).sum(axis=0)


def default_teacher() -> MixtureTeacher:
    """The 2-mode 2-D lab teacher: well-separated modes, mild coupling."""
    return MixtureTeacher(
        weights=np.array([0.5, 0.5]),
        base=np.array([[1.2, 0.6], [-1.2, -0.6]]),
        coupling=np.array([[0.30, -0.10], [0.10, 0.25]]),
        sigma=0.2,
    )

"""Student networks with hand-written reverse-mode gradients.

The topology is fixed (3-layer tanh MLP, linear head), so backprop is a
dozen lines of explicit matrix calculus rather than a framework. Float64
throughout; correctness is pinned by central finite differences in the
test suite (relative error < 1e-3).
"""
from __future__ import annotations

import hashlib
from typing import Dict, Tuple

import numpy as np

from ..errors import ConfigError, ShapeError

Params = Dict[str, np.ndarray]


def sin_temb(t, dim: int = 8) -> np.ndarray:
    """Sinusoidal timestep features for t in [0, 1]: (B, dim) float64."""
    if dim % 2:
        raise ConfigError(f"temb dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    # frequencies log-spaced 1..100: resolves both coarse and fine t
    freqs = 100.0 ** (np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Mlp:
    """x -> tanh(xW0+b0) -> tanh(.W1+b1) -> .W2+b2, explicit backward."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        def init(fan_in: int, fan_out: int) -> np.ndarray:
            return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

        self.params: Params = {
            "W0": init(d_in, d_hidden),
            "b0": np.zeros(d_hidden),
            "W1": init(d_hidden, d_hidden),
            "b1": np.zeros(d_hidden),
            "W2": init(d_hidden, d_out),
            "b2": np.zeros(d_out),
        }

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, tuple]:
        """(output, cache). x is (B, d_in) float64."""
        p = self.params
        if x.ndim != 2 or x.shape[1] != p["W0"].shape[0]:
            raise ShapeError(f"expected (B, {p['W0'].shape[0]}) input, got {x.shape}")
        h0 = np.tanh(x @ p["W0"] + p["b0"])
        h1 = np.tanh(h0 @ p["W1"] + p["b1"])
        y = h1 @ p["W2"] + p["b2"]
        return y, (x, h0, h1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: tuple, dy: np.ndarray) -> Tuple[Params, np.ndarray]:
        """Gradients of a scalar loss given dloss/dy; also returns dloss/dx."""
        x, h0, h1 = cache
        p = self.params
        grads: Params = {}
        grads["W2"] = h1.T @ dy
        grads["b2"] = dy.sum(axis=0)
        dh1 = (dy @ p["W2"].T) * (1.0 - h1**2)
        grads["W1"] = h0.T @ dh1
        grads["b1"] = dh1.sum(axis=0)
        dh0 = (dh1 @ p["W1"].T) * (1.0 - h0**2)
        grads["W0"] = x.T @ dh0
        grads["b0"] = dh0.sum(axis=0)
        dx = dh0 @ p["W0"].T
        return grads, dx

    # -- bookkeeping ----------------------------------------------------

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()[:16]

    def copy_from(self, other: "Mlp") -> None:
        for name, val in other.params.items():
            self.params[name] = val.copy()

    def clone(self) -> "Mlp":
        dup = object.__new__(type(self))
        dup.__dict__.update({k: v for k, v in self.__dict__.items() if k != "params"})
        dup.params = {k: v.copy() for k, v in self.params.items()}
        return dup


class Adam:
    """Standard Adam on a params dict, updating in place."""

    def __init__(self, params: Params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Params) -> None:
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1**self.t)
            v_hat = self.v[k] / (1 - self.b2**self.t)
            self.params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class _CondNet(Mlp):
    """MLP over assembled features (x_t, sinusoidal t, history summary)."""

    def __init__(self, dim: int = 2, temb_dim: int = 8, hidden: int = 64,
                 rng: np.random.Generator | None = None, seed: int = 0):
        rng = rng or np.random.default_rng(np.random.SeedSequence([seed, self._SALT]))
        self.dim = dim
        self.temb_dim = temb_dim
        super().__init__(dim + temb_dim + dim, hidden, dim, rng)

    _SALT = 0

    def features(self, x_t: np.ndarray, t, hist: np.ndarray) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        hist = np.asarray(hist, dtype=np.float64)
        if x_t.shape != hist.shape or x_t.ndim != 2 or x_t.shape[1] != self.dim:
            raise ShapeError(f"x_t {x_t.shape} and hist {hist.shape} must be (B, {self.dim})")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x_t.shape[0],))
        return np.concatenate([x_t, sin_temb(t, self.temb_dim), hist], axis=1)

    def forward_cond(self, x_t: np.ndarray, t, hist: np.ndarray):
        return self.forward(self.features(x_t, t, hist))

    def predict_cond(self, x_t: np.ndarray, t, hist: np.ndarray) -> np.ndarray:
        return self.forward_cond(x_t, t, hist)[0]


class ToyGenerator(_CondNet):
    """G(x_t, t, history) -> x0_hat; backbone and refiner are instances."""

    _SALT = 0x6E0


class FakeScoreNet(_CondNet):
    """s_psi(x_t, t, history) -> score estimate of the generator marginal."""

    _SALT = 0xFA4E

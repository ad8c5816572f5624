"""Distribution-matching updates: fake-score DSM and the generator step.

The generator gradient at a sample x0 = G(...) is obtained by corrupting
x_q = (1-t) x0 + t eps and pushing (1-t) (s_fake - s_real)(x_q) back
through the corruption into G. When the fake score equals the real score
the update is exactly zero, which the tests pin bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError
from .nets import Adam, FakeScoreNet, ToyGenerator
from .teacher import MixtureTeacher

T_CORRUPT = (0.02, 0.98)  # timestep sampling range for perturbation


def sample_t(rng: np.random.Generator, n: int, t_range=T_CORRUPT) -> np.ndarray:
    lo, hi = t_range
    if not 0.0 < lo < hi < 1.0:
        raise ConfigError(f"corruption range must satisfy 0 < lo < hi < 1, got {t_range}")
    return rng.uniform(lo, hi, size=n)


def fake_score_update(
    fake: FakeScoreNet,
    opt: Adam,
    x0: np.ndarray,
    hist: np.ndarray,
    rng: np.random.Generator,
    t_range=T_CORRUPT,
) -> float:
    """One denoising-score-matching step on generator outputs.

    Corruption kernel q(x_t | x0) = N((1-t) x0, t^2 I) has score -(eps)/t
    at x_t = (1-t) x0 + t eps; the t^2 weighting keeps the target bounded.
    Returns the weighted batch loss.
    """
    n = x0.shape[0]
    t = sample_t(rng, n, t_range)
    eps = rng.standard_normal(x0.shape)
    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps
    target = -eps / t[:, None]
    pred, cache = fake.forward_cond(x_t, t, hist)
    resid = pred - target
    w = (t**2)[:, None]
    loss = float((w * resid**2).sum() / n)
    grads, _ = fake.backward(cache, 2.0 * w * resid / n)
    opt.step(grads)
    return loss


@dataclass
class DmdStepInfo:
    """Diagnostics for one generator update."""

    grad_out_norm: float  # mean norm of the per-sample output gradient
    mean_grad_norm: float  # norm of the batch-mean output gradient
    score_gap: float  # mean |s_fake - s_real| over the batch
    anchor_loss: Optional[float]  # regression term, when enabled


def dmd_generator_step(
    gen: ToyGenerator,
    opt: Optional[Adam],
    fake: FakeScoreNet,
    teacher: MixtureTeacher,
    x_in: np.ndarray,
    t_in,
    hist: np.ndarray,
    prev: np.ndarray,
    rng: np.random.Generator,
    w: float = 0.0,
    anchor: Optional[np.ndarray] = None,
    t_range=T_CORRUPT,
) -> DmdStepInfo:
    """One DMD update on the generator (opt=None computes without applying).

    ``prev`` is the clean previous chunk the teacher's conditional is
    defined against; ``hist`` is the (possibly re-noised) history feature
    the networks actually see.
    """
    if (w > 0) != (anchor is not None):
        raise ConfigError("anchor and w must be supplied together")
    n = x_in.shape[0]
    x0_g, cache = gen.forward_cond(x_in, t_in, hist)

    t_c = sample_t(rng, n, t_range)
    eps = rng.standard_normal(x0_g.shape)
    x_q = (1.0 - t_c)[:, None] * x0_g + t_c[:, None] * eps
    s_fake = fake.predict_cond(x_q, t_c, hist)
    s_real = teacher.score(x_q, t_c, prev)

    # d x_q / d x0 = (1 - t); the score difference is the upstream gradient
    g_out = (1.0 - t_c)[:, None] * (s_fake - s_real) / n
    anchor_loss = None
    if anchor is not None:
        resid = x0_g - anchor
        anchor_loss = float((resid**2).sum() / n)
        g_out = g_out + w * 2.0 * resid / n

    grads, _ = gen.backward(cache, g_out)
    if opt is not None:
        opt.step(grads)
    return DmdStepInfo(
        grad_out_norm=float(np.linalg.norm(g_out * n, axis=1).mean()),
        mean_grad_norm=float(np.linalg.norm(g_out.sum(axis=0))),
        score_gap=float(np.linalg.norm(s_fake - s_real, axis=1).mean()),
        anchor_loss=anchor_loss,
    )

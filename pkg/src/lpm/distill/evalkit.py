"""Evaluation helpers for the distillation lab.

Everything here scores generator samples against the closed-form
teacher: mode occupancy and per-mode mean error via the t=0 posterior,
plus a sliced-W2 proxy between sample clouds. Rollout emulators mirror
streaming inference: the 2-NFE chain feeds the backbone its own
re-noised previous chunk, the 3-NFE chain additionally refines at T2
under a clean (previous refined) history.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..denoise import TimestepSchedule, renoise
from ..errors import ShapeError
from .nets import ToyGenerator
from .teacher import MixtureTeacher


def sliced_w2(a: np.ndarray, b: np.ndarray, n_proj: int = 64, seed: int = 0) -> float:
    """Sliced 2-Wasserstein distance between equal-size point clouds."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"sliced_w2 expects matching (n, d) clouds, got {a.shape} vs {b.shape}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x517]))
    dirs = rng.standard_normal((n_proj, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def mode_assignments(
    teacher: MixtureTeacher, samples: np.ndarray, prev: np.ndarray
) -> np.ndarray:
    """Hard mode labels from the clean-data posterior."""
    gamma = teacher.posterior(samples, 0.0, prev)
    return np.argmax(gamma, axis=0)


def evaluate_samples(
    teacher: MixtureTeacher,
    samples: np.ndarray,
    prev: np.ndarray,
    seed: int = 0,
) -> dict:
    """Score a cloud of (sample, prev) pairs against the teacher.

    Occupancy is the fraction of samples whose posterior argmax lands in
    each mode; per-mode mean error is the mean residual to that mode's
    conditional mean, in units of the teacher sigma.
    """
    samples = np.asarray(samples, dtype=np.float64)
    prev = np.asarray(prev, dtype=np.float64)
    n = samples.shape[0]
    if n == 0:
        return {"n": 0}
    modes = mode_assignments(teacher, samples, prev)
    means = teacher.means(prev)  # (K, n, d)
    occupancy = []
    mean_err = []
    for k in range(teacher.n_modes):
        mask = modes == k
        occupancy.append(float(mask.mean()))
        if mask.any():
            resid = samples[mask] - means[k, mask]
            mean_err.append(float(np.linalg.norm(resid.mean(axis=0)) / teacher.sigma))
        else:
            mean_err.append(float("inf"))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    ref, _ = teacher.sample(prev, rng)
    return {
        "n": n,
        "occupancy": occupancy,
        "mean_err_sigma": mean_err,
        "sliced_w2": sliced_w2(samples, ref, seed=seed),
    }


def rollout_2nfe(
    gen: ToyGenerator,
    n: int,
    length: int,
    sched: TimestepSchedule,
    rng: np.random.Generator,
) -> tuple:
    """Backbone-only chain; history is the re-noised previous chunk."""
    d = gen.dim
    prev = np.zeros((n, d))
    cleans = np.empty((n, length, d))
    prevs = np.empty((n, length, d))
    for chunk in range(length):
        prevs[:, chunk] = prev
        hist = renoise(prev, sched.T1, rng.standard_normal((n, d)))
        first = gen.predict_cond(rng.standard_normal((n, d)), sched.T0, hist)
        x_t1 = renoise(first, sched.T1, rng.standard_normal((n, d)))
        prev = gen.predict_cond(x_t1, sched.T1, hist)
        cleans[:, chunk] = prev
    return cleans, prevs


def rollout_3nfe(
    gen: ToyGenerator,
    refiner: ToyGenerator,
    n: int,
    length: int,
    sched: TimestepSchedule,
    rng: np.random.Generator,
) -> tuple:
    """Backbone chain plus refiner pass at T2 under clean history.

    The backbone keeps its own noisy-history chain and carries the
    sequence; the refiner sees the backbone's clean previous chunk,
    mirroring the clean-history cache at feature level.
    """
    d = gen.dim
    bb_prev = np.zeros((n, d))
    cleans = np.empty((n, length, d))
    prevs = np.empty((n, length, d))
    for chunk in range(length):
        prevs[:, chunk] = bb_prev
        hist = renoise(bb_prev, sched.T1, rng.standard_normal((n, d)))
        first = gen.predict_cond(rng.standard_normal((n, d)), sched.T0, hist)
        x_t1 = renoise(first, sched.T1, rng.standard_normal((n, d)))
        clean = gen.predict_cond(x_t1, sched.T1, hist)
        x_t2 = renoise(clean, sched.T2, rng.standard_normal((n, d)))
        cleans[:, chunk] = refiner.predict_cond(x_t2, sched.T2, bb_prev)
        bb_prev = clean
    return cleans, prevs


def eval_pair(
    gen: ToyGenerator,
    refiner: ToyGenerator,
    teacher: MixtureTeacher,
    n: int,
    length: int,
    sched: TimestepSchedule,
    seed: int = 0,
) -> dict:
    """Paired 2-NFE vs 3-NFE comparison on one shared backbone chain.

    The refiner refines the very chunks the backbone produced, and both
    clouds are scored against one teacher reference, so the W2 difference
    reflects the refiner alone rather than independent rollout noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE0A]))
    rng_t2 = np.random.default_rng(np.random.SeedSequence([seed, 0x712]))
    cleans, prevs = rollout_2nfe(gen, n, length, sched, rng)
    bb = cleans[:, -1]
    pv = prevs[:, -1]
    x_t2 = renoise(bb, sched.T2, rng_t2.standard_normal(bb.shape))
    refined = refiner.predict_cond(x_t2, sched.T2, pv)
    ref_cloud, _ = teacher.sample(pv, np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1])))
    return {
        "n": n,
        "w2_2nfe": sliced_w2(bb, ref_cloud, seed=seed),
        "w2_3nfe": sliced_w2(refined, ref_cloud, seed=seed),
    }


def eval_rollouts(
    gen: ToyGenerator,
    refiner: Optional[ToyGenerator],
    teacher: MixtureTeacher,
    n: int,
    length: int,
    sched: TimestepSchedule,
    seed: int = 0,
) -> dict:
    """Roll the stack out and score the final chunk against the teacher."""
    if n == 0:
        return {"n": 0}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE0A]))
    if refiner is None:
        cleans, prevs = rollout_2nfe(gen, n, length, sched, rng)
    else:
        cleans, prevs = rollout_3nfe(gen, refiner, n, length, sched, rng)
    report = evaluate_samples(teacher, cleans[:, -1], prevs[:, -1], seed=seed)
    report["length"] = length
    report["nfe"] = 2 if refiner is None else 3
    return report


def teacher_chain(
    teacher: MixtureTeacher, n: int, length: int, rng: np.random.Generator
) -> np.ndarray:
    """Ancestral teacher rollout; returns the final-chunk cloud (n, d)."""
    prev = np.zeros((n, teacher.dim))
    for _ in range(length):
        prev, _ = teacher.sample(prev, rng)
    return prev


def drift_metric(
    gen: ToyGenerator,
    teacher: MixtureTeacher,
    n: int,
    length: int,
    sched: TimestepSchedule,
    seed: int = 0,
    refiner: Optional[ToyGenerator] = None,
) -> float:
    """Sliced-W2 between the chunk-`length` marginals of generator and teacher.

    Both sides roll their own chain from zeros, so compounding exposure
    error in the generator shows up directly against the teacher's
    stationary marginal.
    """
    if n == 0:
        return float("nan")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD21F]))
    if refiner is None:
        cleans, _ = rollout_2nfe(gen, n, length, sched, rng)
    else:
        cleans, _ = rollout_3nfe(gen, refiner, n, length, sched, rng)
    ref = teacher_chain(teacher, n, length, rng)
    return sliced_w2(cleans[:, -1], ref, seed=seed)

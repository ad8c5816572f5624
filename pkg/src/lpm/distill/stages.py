"""The four-stage curriculum.

Stage 1 regresses the backbone onto teacher ODE trajectories at the
inference levels {T0, T1}. Stage 2 runs DMD off-policy (inputs re-noised
from teacher cleans) with a squared-distance anchor standing in for the
perceptual regularizer. Stage 3 switches to on-policy DMD on the
backbone's own rollouts. Stage 4 freezes the backbone and trains the
refiner (a bit-exact weight copy at start) by DMD at T2 under clean
history. History conditioning mirrors the streaming caches at feature
level: the backbone sees a re-noised previous chunk, the refiner a clean
one.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from ..checkpoint import save_checkpoint
from ..denoise import TimestepSchedule, renoise
from ..errors import ConfigError
from .data import TrajectoryDataset, teacher_ode_rollout
from .dmd import dmd_generator_step, fake_score_update
from .evalkit import drift_metric, eval_rollouts, sliced_w2
from .nets import Adam, FakeScoreNet, ToyGenerator
from .teacher import MixtureTeacher, default_teacher

Curve = List[dict]


def _require_lineage(dataset: TrajectoryDataset, prefix: str, stage: str) -> None:
    if not dataset.lineage.startswith(prefix):
        raise ConfigError(
            f"{stage} requires {prefix}-derived inputs, got lineage {dataset.lineage!r}"
        )


def _check_finite(value: float, stage: str, step: int, extra: dict) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(
            f"{stage} diverged at step {step}: loss={value}, diagnostics={extra}"
        )


def _noisy_hist(prev: np.ndarray, t: float, rng: np.random.Generator) -> np.ndarray:
    return renoise(prev, t, rng.standard_normal(prev.shape))


class _TailAverage:
    """Polyak average of the iterates over the final half of a run.

    Anchor-free DMD stages random-walk around their fixed point; the
    tail mean is a far lower-variance estimate of it than the last
    iterate.
    """

    def __init__(self, params: dict, total_steps: int, frac: float = 0.5):
        self.start = total_steps - int(total_steps * frac) + 1
        self.acc = {k: np.zeros_like(v) for k, v in params.items()}
        self.count = 0

    def update(self, params: dict, step: int) -> None:
        if step >= self.start:
            for k, v in params.items():
                self.acc[k] += v
            self.count += 1

    def snapshot(self) -> Optional[dict]:
        if not self.count:
            return None
        return {k: v / self.count for k, v in self.acc.items()}

    def finalize(self, params: dict) -> None:
        if self.count:
            for k in params:
                params[k][...] = self.acc[k] / self.count


# ---------------------------------------------------------------------------
# stage 1: trajectory regression


def stage1_regress(
    dataset: TrajectoryDataset,
    gen: ToyGenerator,
    sched: TimestepSchedule,
    *,
    steps: int = 1500,
    batch: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
    holdout_frac: float = 0.1,
    eval_every: int = 50,
) -> Curve:
    """Minimize E ||G(x^t, t, hist) - x^0||^2 over t in {T0, T1}."""
    _require_lineage(dataset, "teacher", "stage1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    n_hold = max(1, int(dataset.n_seqs * holdout_frac))
    levels = (sched.T0, sched.T1)

    def flat(arr: np.ndarray, lo: int, hi: int) -> np.ndarray:
        return arr[lo:hi].reshape(-1, dataset.dim)

    # held-out tensors are fixed once (including history noise) so the
    # curve is comparable across steps
    hold = {}
    for lv in levels:
        x = flat(dataset.states[lv], 0, n_hold)
        prev = flat(dataset.prev, 0, n_hold)
        hold[lv] = (x, _noisy_hist(prev, sched.T1, rng), flat(dataset.clean(), 0, n_hold))

    train_x = {lv: flat(dataset.states[lv], n_hold, dataset.n_seqs) for lv in levels}
    train_prev = flat(dataset.prev, n_hold, dataset.n_seqs)
    train_y = flat(dataset.clean(), n_hold, dataset.n_seqs)
    n_train = train_y.shape[0]

    def holdout_loss() -> float:
        total = 0.0
        for lv in levels:
            x, hist, y = hold[lv]
            pred = gen.predict_cond(x, lv, hist)
            total += float(((pred - y) ** 2).sum() / x.shape[0])
        return total / len(levels)

    opt = Adam(gen.params, lr)
    curve: Curve = [{"step": 0, "train": float("nan"), "holdout": holdout_loss()}]
    for step in range(1, steps + 1):
        idx = rng.integers(0, n_train, size=batch)
        lv = levels[int(rng.integers(0, len(levels)))]
        x = train_x[lv][idx]
        y = train_y[idx]
        hist = _noisy_hist(train_prev[idx], sched.T1, rng)
        pred, cache = gen.forward_cond(x, lv, hist)
        resid = pred - y
        loss = float((resid**2).sum() / batch)
        _check_finite(loss, "stage1", step, {"level": lv})
        grads, _ = gen.backward(cache, 2.0 * resid / batch)
        opt.step(grads)
        if step % eval_every == 0 or step == steps:
            curve.append({"step": step, "train": loss, "holdout": holdout_loss()})
    return curve


# ---------------------------------------------------------------------------
# stage 2: off-policy DMD with regression anchor


def stage2_offpolicy(
    dataset: TrajectoryDataset,
    gen: ToyGenerator,
    fake: FakeScoreNet,
    teacher: MixtureTeacher,
    sched: TimestepSchedule,
    *,
    steps: int = 800,
    batch: int = 256,
    w: float = 0.1,
    lr_gen: float = 2e-4,
    lr_fake: float = 1e-3,
    fake_ratio: int = 5,
    seed: int = 0,
    fake_warmup: int = 300,
    log_every: int = 25,
) -> Curve:
    """DMD on re-noised teacher cleans plus w * ||G - x^0||^2.

    Re-noising reuses each trajectory's own t=1 state as the noise, so
    the (input, clean) pairing stays the transport coupling stage 1
    learned; with fresh noise the anchor target at high t would collapse
    to the posterior mean instead.
    """
    _require_lineage(dataset, "teacher", "stage2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    levels = (sched.T0, sched.T1)
    clean = dataset.clean().reshape(-1, dataset.dim)
    noise = dataset.flat(1.0)
    prev = dataset.flat_prev()
    n = clean.shape[0]
    opt_g = Adam(gen.params, lr_gen)
    opt_f = Adam(fake.params, lr_fake)

    def minibatch():
        idx = rng.integers(0, n, size=batch)
        lv = levels[int(rng.integers(0, len(levels)))]
        x0 = clean[idx]
        pv = prev[idx]
        hist = _noisy_hist(pv, sched.T1, rng)
        x_in = renoise(x0, lv, noise[idx])
        return x_in, lv, hist, pv, x0

    # bring the fake score up to date with the incoming generator before
    # any generator update consumes it
    for step in range(fake_warmup):
        x_in, lv, hist, pv, x0 = minibatch()
        samples = gen.predict_cond(x_in, lv, hist)
        f_loss = fake_score_update(fake, opt_f, samples, hist, rng)
        _check_finite(f_loss, "stage2(warmup)", step, {})

    curve: Curve = []
    for step in range(1, steps + 1):
        for _ in range(fake_ratio):
            x_in, lv, hist, pv, x0 = minibatch()
            samples = gen.predict_cond(x_in, lv, hist)
            f_loss = fake_score_update(fake, opt_f, samples, hist, rng)
            _check_finite(f_loss, "stage2(fake)", step, {})
        x_in, lv, hist, pv, x0 = minibatch()
        info = dmd_generator_step(
            gen, opt_g, fake, teacher, x_in, lv, hist, pv, rng, w=w, anchor=x0
        )
        _check_finite(info.anchor_loss, "stage2", step, {"score_gap": info.score_gap})
        if step % log_every == 0 or step == steps:
            curve.append(
                {"step": step, "fake_loss": f_loss, "score_gap": info.score_gap,
                 "anchor": info.anchor_loss}
            )
    return curve


# ---------------------------------------------------------------------------
# backbone rollout shared by stage 3 / stage 4 / eval


def backbone_rollout(
    gen: ToyGenerator,
    n: int,
    length: int,
    sched: TimestepSchedule,
    rng: np.random.Generator,
    collect_tuples: bool = False,
):
    """Emulate streaming 2-NFE inference chunk by chunk.

    Returns (cleans (n, length, d), prevs (n, length, d), tuples), where
    tuples are the (x_in, t, hist, prev) training inputs visited, tagged
    with the weights digest that produced them.
    """
    d = gen.dim
    prev = np.zeros((n, d))
    cleans = np.empty((n, length, d))
    prevs = np.empty((n, length, d))
    tuples = []
    for chunk in range(length):
        prevs[:, chunk] = prev
        hist = _noisy_hist(prev, sched.T1, rng)
        x_t0 = rng.standard_normal((n, d))
        first = gen.predict_cond(x_t0, sched.T0, hist)
        x_t1 = renoise(first, sched.T1, rng.standard_normal((n, d)))
        second = gen.predict_cond(x_t1, sched.T1, hist)
        cleans[:, chunk] = second
        if collect_tuples:
            tuples.append((x_t0, sched.T0, hist, prev.copy()))
            tuples.append((x_t1, sched.T1, hist, prev.copy()))
        prev = second
    lineage = f"rollout:{gen.digest()}"
    return cleans, prevs, (tuples, lineage)


# ---------------------------------------------------------------------------
# stage 3: on-policy DMD


def stage3_onpolicy(
    gen: ToyGenerator,
    fake: FakeScoreNet,
    teacher: MixtureTeacher,
    sched: TimestepSchedule,
    *,
    steps: int = 800,
    batch_traj: int = 48,
    rollout_len: int = 8,
    lr_gen: float = 2e-4,
    lr_fake: float = 1e-3,
    fake_ratio: int = 5,
    seed: int = 0,
    fake_warmup: int = 300,
    log_every: int = 25,
    tail_frac: float = 0.5,
) -> Curve:
    """DMD-only training on the current backbone's own rollouts."""
    if steps == 0:
        return []  # identity on weights by contract
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    opt_g = Adam(gen.params, lr_gen)
    opt_f = Adam(fake.params, lr_fake)
    curve: Curve = []

    def fresh_batch():
        cleans, prevs, (tuples, lineage) = backbone_rollout(
            gen, batch_traj, rollout_len, sched, rng, collect_tuples=True
        )
        if lineage != f"rollout:{gen.digest()}":
            raise ConfigError("stage3 batch lineage does not match current weights")
        # chunk-major to line up with the per-chunk hist rows below
        flat_clean = cleans.transpose(1, 0, 2).reshape(-1, gen.dim)
        flat_hist = np.concatenate([h for _, _, h, _ in tuples[::2]])
        return flat_clean, flat_hist, tuples

    for step in range(fake_warmup):
        flat_clean, flat_hist, _ = fresh_batch()
        f_loss = fake_score_update(fake, opt_f, flat_clean, flat_hist, rng)
        _check_finite(f_loss, "stage3(warmup)", step, {})

    tail = _TailAverage(gen.params, steps, frac=tail_frac)
    for step in range(1, steps + 1):
        flat_clean, flat_hist, tuples = fresh_batch()
        for _ in range(fake_ratio):
            idx = rng.integers(0, flat_clean.shape[0], size=min(256, flat_clean.shape[0]))
            f_loss = fake_score_update(fake, opt_f, flat_clean[idx], flat_hist[idx], rng)
            _check_finite(f_loss, "stage3(fake)", step, {})
        x_in = np.concatenate([x for x, _, _, _ in tuples])
        t_in = np.concatenate([np.full(batch_traj, t) for _, t, _, _ in tuples])
        hist = np.concatenate([h for _, _, h, _ in tuples])
        pv = np.concatenate([p for _, _, _, p in tuples])
        info = dmd_generator_step(gen, opt_g, fake, teacher, x_in, t_in, hist, pv, rng)
        _check_finite(info.score_gap, "stage3", step, {})
        tail.update(gen.params, step)
        if step % log_every == 0 or step == steps:
            curve.append({"step": step, "fake_loss": f_loss, "score_gap": info.score_gap})
    tail.finalize(gen.params)
    return curve


# ---------------------------------------------------------------------------
# stage 4: refiner DMD, backbone frozen


def stage4_refiner(
    backbone: ToyGenerator,
    refiner: ToyGenerator,
    fake: FakeScoreNet,
    teacher: MixtureTeacher,
    sched: TimestepSchedule,
    *,
    steps: int = 600,
    batch_traj: int = 48,
    rollout_len: int = 4,
    lr_gen: float = 2e-4,
    lr_fake: float = 1e-3,
    fake_ratio: int = 5,
    seed: int = 0,
    fake_warmup: int = 300,
    log_every: int = 25,
    tail_frac: float = 0.5,
    snapshot_fracs: tuple = (0.625, 0.75, 0.875, 1.0),
    val_n: int = 4000,
) -> Curve:
    """Train the refiner at T2 on re-noised backbone rollouts.

    The refiner must start as a bit-exact copy of the backbone, and the
    backbone's weights are asserted unchanged when the stage returns.
    History for the refiner is the backbone's clean previous chunk.
    """
    if refiner.digest() != backbone.digest():
        raise ConfigError("refiner must start as an exact copy of the backbone")
    frozen = backbone.digest()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    opt_r = Adam(refiner.params, lr_gen)
    opt_f = Adam(fake.params, lr_fake)
    curve: Curve = []

    def refine_batch():
        """Re-noised backbone rollout chunks with their clean-history rows."""
        cleans, _, _ = backbone_rollout(backbone, batch_traj, rollout_len, sched, rng)
        flat = cleans.transpose(1, 0, 2).reshape(-1, refiner.dim)
        hist = np.concatenate(
            [np.zeros((batch_traj, refiner.dim)), cleans[:, :-1].transpose(1, 0, 2)
             .reshape(-1, refiner.dim)]
        )
        x_in = renoise(flat, sched.T2, rng.standard_normal(flat.shape))
        return x_in, hist

    for step in range(fake_warmup):
        x_in, hist = refine_batch()
        refined = refiner.predict_cond(x_in, sched.T2, hist)
        f_loss = fake_score_update(fake, opt_f, refined, hist, rng)
        _check_finite(f_loss, "stage4(warmup)", step, {})

    tail = _TailAverage(refiner.params, steps, frac=tail_frac)
    snap_steps = sorted({max(1, round(steps * f)) for f in snapshot_fracs})
    snapshots = []
    for step in range(1, steps + 1):
        x_in, hist = refine_batch()
        pv = hist
        refined = refiner.predict_cond(x_in, sched.T2, hist)
        for _ in range(fake_ratio):
            idx = rng.integers(0, refined.shape[0], size=min(256, refined.shape[0]))
            f_loss = fake_score_update(fake, opt_f, refined[idx], hist[idx], rng)
            _check_finite(f_loss, "stage4(fake)", step, {})
        info = dmd_generator_step(
            refiner, opt_r, fake, teacher, x_in, sched.T2, hist, pv, rng
        )
        _check_finite(info.score_gap, "stage4", step, {})
        tail.update(refiner.params, step)
        if step in snap_steps:
            snap = tail.snapshot()
            if snap is not None:
                snapshots.append(snap)
        if step % log_every == 0 or step == steps:
            curve.append({"step": step, "fake_loss": f_loss, "score_gap": info.score_gap})

    # anchor-free DMD lets mode mass random-walk, so different stretches of
    # the tail can land on visibly different mixtures; pick the averaged
    # snapshot that scores best on a held-out rollout, by the same W2 proxy
    # the evaluation uses
    if not snapshots:
        snapshots.append({k: v.copy() for k, v in refiner.params.items()})
    val_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1EC7]))
    cleans, prevs, _ = backbone_rollout(backbone, val_n, rollout_len, sched, val_rng)
    bb, pv = cleans[:, -1], prevs[:, -1]
    x_val = renoise(bb, sched.T2, val_rng.standard_normal(bb.shape))
    ref_cloud, _ = teacher.sample(pv, val_rng)
    best = None
    for cand in snapshots:
        for k in refiner.params:
            refiner.params[k][...] = cand[k]
        score = sliced_w2(refiner.predict_cond(x_val, sched.T2, pv), ref_cloud)
        if best is None or score < best[0]:
            best = (score, cand)
    for k in refiner.params:
        refiner.params[k][...] = best[1][k]

    if backbone.digest() != frozen:
        raise ConfigError("stage4 mutated the frozen backbone")
    return curve


# ---------------------------------------------------------------------------
# full curriculum


@dataclass
class CurriculumConfig:
    seed: int = 0
    sched: TimestepSchedule = field(default_factory=TimestepSchedule)
    teacher: Optional[MixtureTeacher] = None
    n_seqs: int = 4096
    seq_len: int = 4
    substeps: int = 40
    hidden: int = 64
    temb_dim: int = 8
    stage1_steps: int = 1500
    stage2_steps: int = 1600
    stage3_steps: int = 400
    stage4_steps: int = 3000
    stage4_batch_traj: int = 192
    stage4_warmup: int = 1500
    batch: int = 256
    lr_stage1: float = 1e-3
    lr_gen: float = 2e-4
    lr_fake: float = 1e-3
    fake_ratio: int = 5
    fake_warmup: int = 300
    rollout_len: int = 8
    w_anchor: float = 0.1
    eval_rollouts_n: int = 1000
    eval_len: int = 4
    drift_len: int = 16


def run_curriculum(
    config: CurriculumConfig,
    out_dir: Optional[str] = None,
    log: Optional[Callable[[str], None]] = None,
    stages: tuple = (1, 2, 3, 4),
) -> dict:
    """Run the requested stages in order, returning nets, curves, and evals."""
    say = log or (lambda s: None)
    teacher = config.teacher or default_teacher()
    sched = config.sched
    t0 = time.perf_counter()

    say(f"dataset: {config.n_seqs} x {config.seq_len} chunks, {config.substeps} substeps")
    dataset = teacher_ode_rollout(
        teacher, config.n_seqs, config.seq_len, sched, config.seed, config.substeps
    )
    gen = ToyGenerator(teacher.dim, config.temb_dim, config.hidden, seed=config.seed)
    fake = FakeScoreNet(teacher.dim, config.temb_dim, config.hidden, seed=config.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    result: dict = {"teacher": teacher, "dataset": dataset, "gen": gen, "fake": fake,
                    "curves": {}, "evals": {}, "seconds": {}}

    def checkpoint(name: str, nets: dict) -> None:
        if not out:
            return
        tensors = {}
        for net_name, net in nets.items():
            for k, v in net.params.items():
                tensors[f"{net_name}.{k}"] = v.astype(np.float32)
        meta = {"stage": name, "seed": config.seed, "lineage": dataset.lineage,
                "sched": list(sched.levels), "teacher_digest": teacher.digest()}
        save_checkpoint(str(out / f"{name}.ckpt"), meta, tensors)

    def write_curve(name: str, curve: Curve) -> None:
        result["curves"][name] = curve
        if out and curve:
            with open(out / f"{name}_curve.csv", "w", newline="") as fh:
                wr = csv.DictWriter(fh, fieldnames=list(curve[0]))
                wr.writeheader()
                wr.writerows(curve)

    def clock(name: str, start: float) -> None:
        result["seconds"][name] = round(time.perf_counter() - start, 3)
        say(f"{name}: {result['seconds'][name]}s")

    if 1 in stages:
        t = time.perf_counter()
        curve = stage1_regress(
            dataset, gen, sched, steps=config.stage1_steps, batch=config.batch,
            lr=config.lr_stage1, seed=config.seed,
        )
        write_curve("stage1", curve)
        checkpoint("stage1", {"gen": gen})
        result["evals"]["stage1_holdout"] = curve[-1]["holdout"]
        clock("stage1", t)

    if 2 in stages:
        t = time.perf_counter()
        curve = stage2_offpolicy(
            dataset, gen, fake, teacher, sched, steps=config.stage2_steps,
            batch=config.batch, w=config.w_anchor, lr_gen=config.lr_gen,
            lr_fake=config.lr_fake, fake_ratio=config.fake_ratio, seed=config.seed,
            fake_warmup=config.fake_warmup,
        )
        write_curve("stage2", curve)
        checkpoint("stage2", {"gen": gen, "fake": fake})
        result["evals"]["stage2"] = eval_rollouts(
            gen, None, teacher, config.eval_rollouts_n, config.eval_len, sched,
            seed=config.seed + 100,
        )
        result["evals"]["stage2_drift"] = drift_metric(
            gen, teacher, config.eval_rollouts_n, config.drift_len, sched,
            seed=config.seed + 200,
        )
        clock("stage2", t)

    if 3 in stages:
        t = time.perf_counter()
        curve = stage3_onpolicy(
            gen, fake, teacher, sched, steps=config.stage3_steps,
            rollout_len=config.rollout_len, lr_gen=config.lr_gen,
            lr_fake=config.lr_fake, fake_ratio=config.fake_ratio,
            seed=config.seed, fake_warmup=config.fake_warmup,
        )
        write_curve("stage3", curve)
        checkpoint("stage3", {"gen": gen, "fake": fake})
        result["evals"]["stage3"] = eval_rollouts(
            gen, None, teacher, config.eval_rollouts_n, config.eval_len, sched,
            seed=config.seed + 100,
        )
        result["evals"]["stage3_drift"] = drift_metric(
            gen, teacher, config.eval_rollouts_n, config.drift_len, sched,
            seed=config.seed + 200,
        )
        clock("stage3", t)

    refiner = gen.clone()
    result["refiner"] = refiner
    if 4 in stages:
        t = time.perf_counter()
        # warm-start from the stage-3 fake: refined outputs occupy the
        # same modes, only the history conditioning shifts
        fake4 = FakeScoreNet(teacher.dim, config.temb_dim, config.hidden,
                             seed=config.seed + 4)
        if 2 in stages or 3 in stages:
            fake4.copy_from(fake)
        curve = stage4_refiner(
            gen, refiner, fake4, teacher, sched, steps=config.stage4_steps,
            batch_traj=config.stage4_batch_traj, lr_gen=config.lr_gen,
            lr_fake=config.lr_fake, fake_ratio=config.fake_ratio,
            seed=config.seed, fake_warmup=config.stage4_warmup,
        )
        write_curve("stage4", curve)
        checkpoint("stage4", {"gen": gen, "refiner": refiner, "fake": fake4})
        result["evals"]["backbone_2nfe"] = eval_rollouts(
            gen, None, teacher, config.eval_rollouts_n, config.eval_len, sched,
            seed=config.seed + 300,
        )
        result["evals"]["full_3nfe"] = eval_rollouts(
            gen, refiner, teacher, config.eval_rollouts_n, config.eval_len, sched,
            seed=config.seed + 300,
        )
        clock("stage4", t)

    result["seconds"]["total"] = round(time.perf_counter() - t0, 3)
    if out:
        evals_json = {
            k: v for k, v in result["evals"].items()
        }
        with open(out / "eval.json", "w") as fh:
            json.dump(evals_json, fh, indent=2, sort_keys=True, default=float)
    say(f"total: {result['seconds']['total']}s")
    return result

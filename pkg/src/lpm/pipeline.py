"""Overlapped generator -> refiner -> decoder pipeline.

Each stage has capacity 1 and consumes chunks FIFO; generator(k) depends on
generator(k-1) (the KV chain), refiner(k) on generator(k), decoder(k) on
refiner(k). The refiner never feeds the generator. The same dependency
wiring runs under a simulated clock (analytic discrete-event scheduling) or
a wall clock (three worker threads); only timings differ, never orderings.
"""
from __future__ import annotations

import argparse
import json
import sys
import threading
import time
from dataclasses import dataclass, field
from queue import Queue
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

STAGES = ("generator", "refiner", "decoder")

WorkFn = Callable[[str, int], None]


@dataclass(frozen=True)
class StageSpec:
    """name + fixed latency in simulated ms, or "measured" to time real work."""

    name: str
    latency_ms: Union[float, str]

    def __post_init__(self):
        if self.name not in STAGES:
            raise ValueError(f"stage name must be one of {STAGES}, got {self.name!r}")
        if isinstance(self.latency_ms, str):
            if self.latency_ms != "measured":
                raise ValueError(f"latency must be a number or 'measured', got {self.latency_ms!r}")
        elif self.latency_ms < 0:
            raise ValueError(f"latency must be >= 0, got {self.latency_ms}")


def default_stages(lat: Sequence[float] = (700.0, 700.0, 180.0)) -> Tuple[StageSpec, ...]:
    if len(lat) != 3:
        raise ValueError(f"need 3 latencies, got {len(lat)}")
    return tuple(StageSpec(name, l) for name, l in zip(STAGES, lat))


@dataclass
class ChunkJob:
    """One chunk's trip through one stage."""

    chunk: int
    stage: str
    t_enqueue: float
    t_start: float
    t_finish: float

    def to_dict(self) -> Dict:
        return {
            "chunk": self.chunk,
            "stage": self.stage,
            "t_enqueue": round(self.t_enqueue, 3),
            "t_start": round(self.t_start, 3),
            "t_finish": round(self.t_finish, 3),
        }


@dataclass
class PipelineTrace:
    clock: str
    stages: Tuple[StageSpec, ...]
    jobs: List[ChunkJob] = field(default_factory=list)

    def by_stage(self, stage: str) -> List[ChunkJob]:
        return sorted((j for j in self.jobs if j.stage == stage), key=lambda j: j.chunk)

    def job(self, stage: str, chunk: int) -> ChunkJob:
        for j in self.jobs:
            if j.stage == stage and j.chunk == chunk:
                return j
        raise KeyError(f"no job for ({stage}, {chunk})")

    def stage_orders(self) -> Dict[str, List[int]]:
        """Chunk processing order per stage (by start time)."""
        out = {}
        for s in STAGES:
            out[s] = [j.chunk for j in sorted(
                (j for j in self.jobs if j.stage == s), key=lambda j: j.t_start
            )]
        return out

    def write_ndjson(self, path: str) -> None:
        with open(path, "w") as f:
            for j in sorted(self.jobs, key=lambda j: (j.t_start, STAGES.index(j.stage), j.chunk)):
                f.write(json.dumps(j.to_dict(), separators=(",", ":")) + "\n")


class StageScheduler:
    """Incremental analytic event scheduling for the simulated clock.

    schedule(k, admit_time) books all three stages for chunk k respecting
    capacity-1 FIFO per stage and the cross-stage dependencies, and returns
    the three jobs. Latencies may be callables resolved at booking time.
    """

    def __init__(self, stages: Sequence[StageSpec], work: Optional[WorkFn] = None):
        if tuple(s.name for s in stages) != STAGES:
            raise ValueError("scheduler needs (generator, refiner, decoder) specs in order")
        self.stages = tuple(stages)
        self.work = work
        self._free_at = {s: 0.0 for s in STAGES}
        self._next_chunk = 0

    def _latency(self, spec: StageSpec, chunk: int) -> float:
        if spec.latency_ms == "measured":
            if self.work is None:
                raise ValueError("'measured' latency needs a work function")
            t0 = time.perf_counter()
            self.work(spec.name, chunk)
            return (time.perf_counter() - t0) * 1000.0
        if self.work is not None:
            self.work(spec.name, chunk)
        return float(spec.latency_ms)

    def schedule(self, chunk: int, admit_time: float) -> List[ChunkJob]:
        if chunk != self._next_chunk:
            raise ValueError(f"chunks must be scheduled in order; expected {self._next_chunk}")
        self._next_chunk += 1
        jobs = []
        ready = admit_time
        for spec in self.stages:
            start = max(ready, self._free_at[spec.name])
            finish = start + self._latency(spec, chunk)
            jobs.append(ChunkJob(chunk, spec.name, ready, start, finish))
            self._free_at[spec.name] = finish
            ready = finish
        return jobs

    def generator_free_at(self) -> float:
        return self._free_at["generator"]


def _run_sim(n_chunks: int, stages: Sequence[StageSpec], work: Optional[WorkFn]) -> PipelineTrace:
    trace = PipelineTrace("sim", tuple(stages))
    sched = StageScheduler(stages, work)
    for k in range(n_chunks):
        trace.jobs.extend(sched.schedule(k, admit_time=0.0))
    return trace


def _run_wall(
    n_chunks: int,
    stages: Sequence[StageSpec],
    work: Optional[WorkFn],
    time_scale: float,
) -> PipelineTrace:
    """Three worker threads chained by queues; times recorded in virtual ms
    (wall ms divided by time_scale) so traces are comparable with sim."""
    trace = PipelineTrace("wall", tuple(stages))
    lock = threading.Lock()
    t0 = time.perf_counter()

    def now() -> float:
        return (time.perf_counter() - t0) * 1000.0 / time_scale

    queues = {s.name: Queue() for s in stages}
    names = [s.name for s in stages]

    def worker(idx: int):
        spec = stages[idx]
        q = queues[spec.name]
        nxt = queues[names[idx + 1]] if idx + 1 < len(names) else None
        while True:
            item = q.get()
            if item is None:
                if nxt is not None:
                    nxt.put(None)
                return
            chunk, enq = item
            start = now()
            if spec.latency_ms == "measured":
                if work is None:
                    raise ValueError("'measured' latency needs a work function")
                work(spec.name, chunk)
            else:
                if work is not None:
                    work(spec.name, chunk)
                time.sleep(float(spec.latency_ms) * time_scale / 1000.0)
            finish = now()
            with lock:
                trace.jobs.append(ChunkJob(chunk, spec.name, enq, start, finish))
            if nxt is not None:
                nxt.put((chunk, finish))

    threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(3)]
    for th in threads:
        th.start()
    for k in range(n_chunks):
        queues["generator"].put((k, 0.0))
    queues["generator"].put(None)
    for th in threads:
        th.join()
    return trace


def run(
    n_chunks: int,
    stages: Optional[Sequence[StageSpec]] = None,
    clock: str = "sim",
    work: Optional[WorkFn] = None,
    time_scale: float = 1.0,
) -> PipelineTrace:
    """Push chunks 0..n-1 through the three stages under the chosen clock."""
    if n_chunks <= 0:
        raise ValueError(f"n_chunks must be > 0, got {n_chunks}")
    stages = tuple(stages) if stages is not None else default_stages()
    if tuple(s.name for s in stages) != STAGES:
        raise ValueError("stages must be (generator, refiner, decoder)")
    if clock == "sim":
        return _run_sim(n_chunks, stages, work)
    if clock == "wall":
        if time_scale <= 0:
            raise ValueError("time_scale must be > 0")
        return _run_wall(n_chunks, stages, work, time_scale)
    raise ValueError(f"clock must be 'sim' or 'wall', got {clock!r}")


def validate_dependencies(trace: PipelineTrace) -> None:
    """Capacity-1 FIFO per stage and the three dependency chains."""
    eps = 1e-6
    for s in STAGES:
        jobs = trace.by_stage(s)
        for a, b in zip(jobs, jobs[1:]):
            if b.t_start < a.t_finish - eps:
                raise AssertionError(f"{s} overlapped chunks {a.chunk} and {b.chunk}")
    gens = {j.chunk: j for j in trace.by_stage("generator")}
    refs = {j.chunk: j for j in trace.by_stage("refiner")}
    decs = {j.chunk: j for j in trace.by_stage("decoder")}
    for k, r in refs.items():
        if r.t_start < gens[k].t_finish - eps:
            raise AssertionError(f"refiner({k}) started before generator({k}) finished")
    for k, d in decs.items():
        if d.t_start < refs[k].t_finish - eps:
            raise AssertionError(f"decoder({k}) started before refiner({k}) finished")


def metrics(trace: PipelineTrace) -> Dict:
    """Time-to-first-result, steady-state period, per-stage utilization."""
    decs = trace.by_stage("decoder")
    if not decs:
        raise ValueError("trace has no decoder jobs")
    ttfr = decs[0].t_finish
    n = len(decs)
    period = (decs[-1].t_finish - decs[0].t_finish) / (n - 1) if n > 1 else None
    util = {}
    for s in STAGES:
        jobs = trace.by_stage(s)
        busy = sum(j.t_finish - j.t_start for j in jobs)
        span = max(j.t_finish for j in jobs) - min(j.t_start for j in jobs)
        util[s] = busy / span if span > 0 else 1.0
    return {
        "chunks": n,
        "ttfr_ms": ttfr,
        "steady_period_ms": period,
        "utilization": util,
    }


def realtime_margin(trace: PipelineTrace, chunk_duration_ms: float = 1000.0) -> List[float]:
    """slack_k = k * chunk_duration + TTFR - decoder_finish(k).

    Positive and growing slack means generation outruns playback."""
    decs = trace.by_stage("decoder")
    if not decs:
        raise ValueError("trace has no decoder jobs")
    ttfr = decs[0].t_finish
    return [k * chunk_duration_ms + ttfr - j.t_finish for k, j in enumerate(decs)]


def main(argv: Optional[Sequence[str]] = None) -> int:
    p = argparse.ArgumentParser(
        prog="pipeline-sim",
        description="Simulate the generator/refiner/decoder pipeline and print metrics.",
    )
    p.add_argument("--chunks", type=int, default=20)
    p.add_argument("--lat", type=str, default="700,700,180",
                   help="three stage latencies in ms, comma-separated")
    p.add_argument("--clock", choices=("sim", "wall"), default="sim")
    p.add_argument("--time-scale", type=float, default=1.0,
                   help="wall-clock compression factor (0.01 = 100x faster)")
    p.add_argument("--chunk-duration", type=float, default=1000.0)
    p.add_argument("--trace", type=str, default=None, help="write per-job NDJSON here")
    args = p.parse_args(argv)

    try:
        lat = [float(x) for x in args.lat.split(",")]
        stages = default_stages(lat)
    except ValueError as e:
        p.error(str(e))
    trace = run(args.chunks, stages, clock=args.clock, time_scale=args.time_scale)
    validate_dependencies(trace)
    m = metrics(trace)
    slack = realtime_margin(trace, args.chunk_duration)
    m["slack_first_ms"] = slack[0]
    m["slack_last_ms"] = slack[-1]
    if args.trace:
        trace.write_ndjson(args.trace)
    json.dump(m, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

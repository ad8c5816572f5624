"""Command line front end for the distillation lab."""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from .stages import CurriculumConfig, run_curriculum


def main(argv: Optional[list] = None) -> int:
    p = argparse.ArgumentParser(
        prog="distill-lab",
        description="Run the four-stage few-step distillation curriculum "
        "against the closed-form mixture teacher.",
    )
    p.add_argument("--stage", type=int, choices=(1, 2, 3, 4), action="append",
                   help="stage to run (repeatable; earlier stages of the chain "
                   "are run first automatically)")
    p.add_argument("--all", action="store_true", help="run stages 1-4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="directory for checkpoints, "
                   "curves, and eval.json")
    p.add_argument("--steps", type=str, default=None,
                   help="override step budgets as s1,s2,s3,s4")
    p.add_argument("--rollouts", type=int, default=None,
                   help="override evaluation rollout count")
    p.add_argument("--quiet", action="store_true")
    args = p.parse_args(argv)

    picked = set(args.stage or [])
    if args.all or not picked:
        picked = {1, 2, 3, 4}
    # stages are cumulative: running 3 requires the weights 1 and 2 produce
    stages = tuple(s for s in (1, 2, 3, 4) if s <= max(picked))

    cfg = CurriculumConfig(seed=args.seed)
    if args.steps:
        parts = [int(x) for x in args.steps.split(",")]
        if len(parts) != 4:
            p.error("--steps wants four comma-separated integers")
        cfg.stage1_steps, cfg.stage2_steps, cfg.stage3_steps, cfg.stage4_steps = parts
    if args.rollouts is not None:
        cfg.eval_rollouts_n = args.rollouts

    log = (lambda s: None) if args.quiet else (lambda s: print(s, file=sys.stderr))
    result = run_curriculum(cfg, out_dir=args.out, log=log, stages=stages)
    print(json.dumps(result["evals"], indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Distillation lab: four-stage curriculum against an analytic
autoregressive Gaussian-mixture teacher, with hand-written reverse-mode
gradients for the student MLPs."""
from .teacher import MixtureTeacher, default_teacher
from .nets import Adam, Mlp, FakeScoreNet, ToyGenerator, sin_temb
from .data import TrajectoryDataset, ode_integrate, teacher_ode_rollout
from .dmd import dmd_generator_step, fake_score_update
from .stages import (
    CurriculumConfig,
    run_curriculum,
    stage1_regress,
    stage2_offpolicy,
    stage3_onpolicy,
    stage4_refiner,
)
from .evalkit import eval_rollouts, drift_metric, sliced_w2

__all__ = [
    "MixtureTeacher",
    "default_teacher",
    "Adam",
    "Mlp",
    "FakeScoreNet",
    "ToyGenerator",
    "sin_temb",
    "TrajectoryDataset",
    "ode_integrate",
    "teacher_ode_rollout",
    "dmd_generator_step",
    "fake_score_update",
    "CurriculumConfig",
    "run_curriculum",
    "stage1_regress",
    "stage2_offpolicy",
    "stage3_onpolicy",
    "stage4_refiner",
    "eval_rollouts",
    "drift_metric",
    "sliced_w2",
]

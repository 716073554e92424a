"""Gradient and weight leakage attacks."""
from .core import (
    GRADIENT_OBJECTIVES,
    OBJECTIVES,
    WEIGHT_OBJECTIVES,
    AttackConfig,
    AttackResult,
    evaluate,
    run_attack,
)
from .estimator import LeakageAttack
from .objectives import (
    estimate_alpha,
    objective_cosine,
    objective_dlg,
    objective_dlg_k,
    objective_dlm,
    objective_dlm_plus,
    weight_delta,
)
from .optim import AdamState, LBFGSState, adam_step, lbfgs_step, two_loop

__all__ = [
    "AdamState",
    "AttackConfig",
    "AttackResult",
    "GRADIENT_OBJECTIVES",
    "LBFGSState",
    "LeakageAttack",
    "OBJECTIVES",
    "WEIGHT_OBJECTIVES",
    "adam_step",
    "estimate_alpha",
    "evaluate",
    "lbfgs_step",
    "objective_cosine",
    "objective_dlg",
    "objective_dlg_k",
    "objective_dlm",
    "objective_dlm_plus",
    "run_attack",
    "two_loop",
    "weight_delta",
]

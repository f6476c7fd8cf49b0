"""Six attacks behind two oracle surfaces: gradient access for FGSM, PGD and
C&W-L2; predicted probabilities only for Square, Boundary and ZOO."""

from .boundary import NoAdversarialStart, adversarial_start, boundary_attack
from .norms import NORMS, lp_norm, normalized_step, project_ball, project_l1_ball
from .oracles import GradientOracle, PredictOracle
from .runner import (
    ATTACK_KINDS,
    BLACK_BOX,
    WHITE_BOX,
    AdversarialBatch,
    AttackConfig,
    AttackConfigError,
    AttackReport,
    attack_one,
    run_attack,
    worker_threads,
)
from .square import SquareStep, meta_pseudo_gaussian_pert, p_selection, square_attack
from .white_box import AttackOutcome, cw_l2, fgsm, margin, pgd
from .zoo import coordinate_gradient, zoo

__all__ = [
    "ATTACK_KINDS",
    "BLACK_BOX",
    "NORMS",
    "WHITE_BOX",
    "AdversarialBatch",
    "AttackConfig",
    "AttackConfigError",
    "AttackOutcome",
    "AttackReport",
    "GradientOracle",
    "NoAdversarialStart",
    "PredictOracle",
    "SquareStep",
    "adversarial_start",
    "attack_one",
    "boundary_attack",
    "coordinate_gradient",
    "cw_l2",
    "fgsm",
    "lp_norm",
    "margin",
    "meta_pseudo_gaussian_pert",
    "normalized_step",
    "p_selection",
    "pgd",
    "project_ball",
    "project_l1_ball",
    "run_attack",
    "square_attack",
    "worker_threads",
    "zoo",
]

from .batch import attack_batch, image_seed, run_attack
from .common import AttackResult, AttackStep, clip_valid, scale_augmented_gradient
from .gradient_attacks import cw_attack, fgsm, ifgsm
from .mix_attack import accumulate_momentum, mix_attack, normalized_step

__all__ = [
    "AttackResult",
    "AttackStep",
    "accumulate_momentum",
    "attack_batch",
    "clip_valid",
    "cw_attack",
    "fgsm",
    "ifgsm",
    "image_seed",
    "mix_attack",
    "normalized_step",
    "run_attack",
    "scale_augmented_gradient",
]

"""Mixup / Mixcut feature-space adversarial attacks for image classifiers and segmenters."""
import logging

from .attacks import AttackResult, attack_batch, cw_attack, fgsm, ifgsm, mix_attack, run_attack
from .config import AttackConfig, AttackMethod, InputSpec, LossKind, LossSpec, Task, make_attack_config
from .dataset_io import ImageDataset, export_adversarial_set, load_dataset, save_dataset
from .errors import MixAttackError
from .metrics import EvalReport, f1_scores, overall_accuracy, success_rate
from .model_interface import ModelHandle, extract_features, input_gradient, predict_logits, resolve_model
from .virtual_samples import build_virtual_sample, make_mixcut, make_mixup

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackMethod",
    "AttackResult",
    "EvalReport",
    "ImageDataset",
    "InputSpec",
    "LossKind",
    "LossSpec",
    "MixAttackError",
    "ModelHandle",
    "Task",
    "attack_batch",
    "build_virtual_sample",
    "cw_attack",
    "export_adversarial_set",
    "extract_features",
    "f1_scores",
    "fgsm",
    "ifgsm",
    "input_gradient",
    "load_dataset",
    "make_attack_config",
    "make_mixcut",
    "make_mixup",
    "mix_attack",
    "overall_accuracy",
    "predict_logits",
    "resolve_model",
    "run_attack",
    "save_dataset",
    "success_rate",
]

"""
Logit-level baselines: FGSM and its l2 / l-inf normalized variants, I-FGSM, and the C&W
objective minimized with l-inf normalized gradient steps.
"""
import logging
from typing import Literal, Optional

import torch

from ..errors import ArgumentError
from ..losses import Label
from ..model_interface import ModelHandle, evaluate_loss, loss_and_gradient
from .common import AttackResult, AttackStep, ce_value, classification_loss, clip_valid

logger = logging.getLogger(__name__)

Norm = Literal["sign", "l2", "linf"]


def fgsm(
    model: ModelHandle,
    image: torch.Tensor,
    label: Label,
    epsilon: float = 1.0,
    norm: Norm = "sign",
    valid_mask: Optional[torch.Tensor] = None,
) -> AttackResult:
    """One step of size epsilon along sign(grad), grad/||grad||_2 or grad/||grad||_inf."""
    x = image.detach().to(model.dtype)
    value, grad = loss_and_gradient(model, classification_loss(model), x, label, valid_mask=valid_mask)
    if norm not in ("sign", "l2", "linf"):
        raise ArgumentError(f"unknown fgsm norm {norm!r}")
    skipped = False
    if norm == "sign":
        direction = torch.sign(grad)
    else:
        scale = grad.norm(p=2) if norm == "l2" else grad.abs().max()
        skipped = float(scale) == 0.0
        direction = torch.zeros_like(grad) if skipped else grad / scale
    if norm == "sign" and not bool(grad.any()):
        skipped = True
    adversarial = clip_valid(x + epsilon * direction)
    step = AttackStep(iteration=0, loss=value, ce=value, grad_l1=float(grad.abs().sum()), skipped=skipped)
    return AttackResult.from_iterate(
        x,
        adversarial,
        trace=[step],
        final_ce=ce_value(model, adversarial, label, valid_mask),
        config={"method": "fgsm" if norm == "sign" else f"fgsm_{norm}", "epsilon": epsilon},
    )


def ifgsm(
    model: ModelHandle,
    image: torch.Tensor,
    label: Label,
    alpha: float = 1.0,
    iterations: int = 5,
    valid_mask: Optional[torch.Tensor] = None,
) -> AttackResult:
    """T sign steps of size alpha, clipped to the pixel range after every step."""
    x = image.detach().to(model.dtype)
    x_adv = x.clone()
    trace = []
    for t in range(iterations):
        value, grad = loss_and_gradient(model, classification_loss(model), x_adv, label, valid_mask=valid_mask)
        skipped = not bool(grad.any())
        trace.append(AttackStep(iteration=t, loss=value, ce=value, grad_l1=float(grad.abs().sum()), skipped=skipped))
        x_adv = clip_valid(x_adv + alpha * torch.sign(grad))
    return AttackResult.from_iterate(
        x,
        x_adv,
        trace=trace,
        final_ce=ce_value(model, x_adv, label, valid_mask),
        config={"method": "ifgsm", "alpha": alpha, "iterations": iterations},
    )


def cw_attack(
    model: ModelHandle,
    image: torch.Tensor,
    label: Label,
    mu: float = 1.0,
    alpha: float = 1.0,
    iterations: int = 5,
    valid_mask: Optional[torch.Tensor] = None,
) -> AttackResult:
    """Minimize ||x_adv - x||_inf - mu * CE(x_adv) with T l-inf normalized gradient steps."""
    if mu < 0:
        raise ArgumentError(f"mu must be nonnegative, got {mu}")
    x = image.detach().to(model.dtype)
    x_adv = x.clone()
    spec = classification_loss(model)
    trace = []
    for t in range(iterations):
        z = x_adv.clone().requires_grad_(True)
        ce = evaluate_loss(model, spec, z, label, valid_mask=valid_mask)
        objective = (z - x).abs().amax() - mu * ce
        (grad,) = torch.autograd.grad(objective, z)
        scale = float(grad.abs().max())
        trace.append(
            AttackStep(
                iteration=t,
                loss=objective.item(),
                ce=ce.item(),
                grad_l1=float(grad.abs().sum()),
                skipped=scale == 0.0,
            )
        )
        if scale == 0.0:
            continue
        x_adv = clip_valid(x_adv - alpha * grad / scale)
    return AttackResult.from_iterate(
        x,
        x_adv,
        trace=trace,
        final_ce=ce_value(model, x_adv, label, valid_mask),
        config={"method": "cw", "mu": mu, "alpha": alpha, "iterations": iterations},
    )

"""
Mixup / Mixcut attack: gradient ascent on the mix loss plus beta times cross-entropy, with
l1-normalized momentum accumulation and an l-inf normalized step.

    g_0 = 0, x_0 = x
    g_{t+1} = g_t + grad_t / ||grad_t||_1
    x_{t+1} = clip(x_t + alpha * g_{t+1} / ||g_{t+1}||_inf)

Without momentum the step direction is grad_t itself. Norms are taken over the whole
gradient tensor. Iterates are only clipped to the pixel range, never projected onto an
epsilon-ball; the T * alpha bound follows from the normalized step.
"""
import logging
from typing import Optional, Tuple

import torch

from ..config import AttackConfig, LossSpec
from ..errors import ArgumentError
from ..losses import Label
from ..model_interface import ModelHandle
from .common import (
    AttackResult,
    AttackStep,
    _scaled_loss_and_gradient,
    ce_value,
    clip_valid,
    needs_tiling,
    tiled_loss_and_gradient,
    virtual_features_for,
)

logger = logging.getLogger(__name__)


def accumulate_momentum(g: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """g + grad / ||grad||_1; g is returned unchanged for an all-zero gradient."""
    l1 = grad.abs().sum()
    if float(l1) == 0.0:
        return g
    return g + grad / l1


def normalized_step(image: torch.Tensor, direction: torch.Tensor, alpha: float) -> Tuple[torch.Tensor, bool]:
    """clip(image + alpha * direction / ||direction||_inf), or (image, True) when direction is zero."""
    scale = direction.abs().max()
    if float(scale) == 0.0:
        return image, True
    return clip_valid(image + alpha * direction / scale), False


def attack_gradient(
    model: ModelHandle,
    loss: LossSpec,
    image: torch.Tensor,
    label: Optional[Label],
    virtual_features: Optional[torch.Tensor],
    config: AttackConfig,
    valid_mask: Optional[torch.Tensor] = None,
) -> Tuple[float, torch.Tensor]:
    m = config.scale_copies if config.use_scale_augmentation else 1
    if needs_tiling(model, image, config.tile):
        return tiled_loss_and_gradient(
            model, loss, image, label, virtual_features, valid_mask, config.tile, config.tile_overlap, m
        )
    return _scaled_loss_and_gradient(model, loss, image, label, virtual_features, m, valid_mask)


def mix_attack(
    model: ModelHandle,
    image: torch.Tensor,
    label: Label,
    virtual: Optional[torch.Tensor],
    config: AttackConfig,
    valid_mask: Optional[torch.Tensor] = None,
) -> AttackResult:
    loss = config.loss_spec(model.task)
    if loss.kind.needs_virtual and virtual is None:
        raise ArgumentError(f"{config.method.value} attack needs a virtual sample")

    x = image.detach().to(model.dtype)
    virtual_features = virtual_features_for(model, virtual, x, config.tile) if loss.kind.needs_virtual else None

    # tiled images carry no CE trace; it would need a full-image forward
    trace_ce = not needs_tiling(model, x, config.tile)
    x_adv = x.clone()
    g = torch.zeros_like(x)
    trace = []
    for t in range(config.iterations):
        value, grad = attack_gradient(model, loss, x_adv, label, virtual_features, config, valid_mask)
        if config.use_momentum:
            g = accumulate_momentum(g, grad)
            direction = g
        else:
            direction = grad
        ce = ce_value(model, x_adv, label, valid_mask) if trace_ce else None
        x_adv, skipped = normalized_step(x_adv, direction, config.alpha)
        if skipped:
            logger.warning("%s: zero update direction at iteration %d, step skipped", model.model_id, t)
        trace.append(AttackStep(iteration=t, loss=value, ce=ce, grad_l1=float(grad.abs().sum()), skipped=skipped))

    final_loss, _ = attack_gradient(model, loss, x_adv, label, virtual_features, config, valid_mask)
    return AttackResult.from_iterate(
        x,
        x_adv,
        trace=trace,
        final_loss=final_loss,
        final_ce=ce_value(model, x_adv, label, valid_mask) if trace_ce else None,
        config=config.model_dump(mode="json"),
    )

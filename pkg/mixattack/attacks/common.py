from typing import List, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field

from ..config import LossKind, LossSpec, Task
from ..dataset_io import reassemble, tile_image
from ..errors import ArgumentError
from ..losses import Label
from ..model_interface import ModelHandle, evaluate_loss, extract_features, loss_and_gradient
from ..virtual_samples import resize_image

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


class AttackStep(BaseModel):
    iteration: int
    loss: float = Field(description="objective value at the iterate before the step")
    ce: Optional[float] = Field(default=None, description="unweighted cross-entropy at the same iterate")
    grad_l1: float
    skipped: bool = Field(default=False, description="zero update direction, iterate unchanged")


class AttackResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    adversarial: torch.Tensor
    perturbation: torch.Tensor
    trace: List[AttackStep] = Field(default_factory=list)
    final_loss: Optional[float] = None
    final_ce: Optional[float] = None
    config: dict = Field(default_factory=dict)
    name: Optional[str] = None
    error: Optional[str] = None

    @property
    def linf(self) -> float:
        return float(self.perturbation.abs().max()) if self.perturbation.numel() else 0.0

    @property
    def flagged(self) -> bool:
        return any(step.skipped for step in self.trace)

    @classmethod
    def from_iterate(cls, clean: torch.Tensor, adversarial: torch.Tensor, **kwargs) -> "AttackResult":
        adversarial = adversarial.detach()
        return cls(adversarial=adversarial, perturbation=adversarial - clean, **kwargs)

    @classmethod
    def failed(cls, clean: torch.Tensor, error: str, **kwargs) -> "AttackResult":
        return cls(adversarial=clean.clone(), perturbation=torch.zeros_like(clean), error=error, **kwargs)


def clip_valid(image: torch.Tensor) -> torch.Tensor:
    return torch.clamp(image, PIXEL_MIN, PIXEL_MAX)


def classification_loss(model: ModelHandle) -> LossSpec:
    """Plain CE for the model's task, used by the baseline attacks."""
    kind = LossKind.seg_ce if model.task == Task.segmentation else LossKind.ce
    return LossSpec(kind=kind)


def ce_value(
    model: ModelHandle, image: torch.Tensor, label: Label, valid_mask: Optional[torch.Tensor] = None
) -> float:
    with torch.no_grad():
        return float(evaluate_loss(model, classification_loss(model), image, label, valid_mask=valid_mask))


def scale_augmented_gradient(
    model: ModelHandle,
    loss: LossSpec,
    image: torch.Tensor,
    label: Optional[Label] = None,
    virtual_features: Optional[torch.Tensor] = None,
    m: int = 3,
    valid_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean over i < m of the gradient, w.r.t. the unscaled image, of the loss at image / 2**i."""
    return _scaled_loss_and_gradient(model, loss, image, label, virtual_features, m, valid_mask)[1]


def _scaled_loss_and_gradient(model, loss, image, label, virtual_features, m, valid_mask):
    if m < 1:
        raise ArgumentError(f"scale copies must be >= 1, got {m}")
    if m == 1:
        return loss_and_gradient(model, loss, image, label, virtual_features, valid_mask)
    x = image.detach().to(model.dtype).clone().requires_grad_(True)
    total = sum(evaluate_loss(model, loss, x / 2**i, label, virtual_features, valid_mask) for i in range(m))
    (grad,) = torch.autograd.grad(total, x)
    return total.item() / m, grad / m


def tiled_loss_and_gradient(
    model: ModelHandle,
    loss: LossSpec,
    image: torch.Tensor,
    label: Optional[torch.Tensor],
    virtual_features: Optional[torch.Tensor],
    valid_mask: Optional[torch.Tensor],
    tile: int,
    overlap: int,
    m: int = 1,
):
    """Per-tile gradients of a segmentation loss, overlap-averaged back onto the full image."""
    image_tiles, geometry = tile_image(image, tile, overlap)
    label_tiles = tile_image(label, tile, overlap)[0] if label is not None else [None] * len(image_tiles)
    mask_tiles = tile_image(valid_mask, tile, overlap)[0] if valid_mask is not None else [None] * len(image_tiles)
    value, grads = 0.0, []
    for x, y, mask in zip(image_tiles, label_tiles, mask_tiles):
        v, g = _scaled_loss_and_gradient(model, loss, x, y, virtual_features, m, mask)
        value += v
        grads.append(g)
    return value, reassemble(grads, geometry)


def needs_tiling(model: ModelHandle, image: torch.Tensor, tile: int) -> bool:
    return model.task == Task.segmentation and max(image.shape[0], image.shape[1]) > tile


def virtual_features_for(
    model: ModelHandle, virtual: torch.Tensor, image: torch.Tensor, tile: int
) -> torch.Tensor:
    """Tap features of the virtual sample at the resolution the attack works on."""
    if needs_tiling(model, image, tile):
        h, w = min(tile, image.shape[0]), min(tile, image.shape[1])
    else:
        h, w = image.shape[0], image.shape[1]
    return extract_features(model, resize_image(virtual.to(model.dtype), h, w))

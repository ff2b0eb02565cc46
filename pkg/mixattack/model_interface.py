"""
Surrogate / victim model contract.

Images are channel-last float tensors in pixel units, canonical range [0, 255]. The
handle perturbs nothing itself: scaling and mean/std normalization happen inside
`ModelHandle.prepare`, so attacks always work in pixel space.
"""
import logging
import threading
from typing import Optional

import torch
from torch import nn

from .config import InputSpec, LossKind, LossSpec, ModelRegistry, Task
from .errors import ArgumentError, ConfigurationError, DimensionError
from .losses import Label, cross_entropy, mix_loss, seg_cross_entropy, total_loss

logger = logging.getLogger(__name__)

POOLING_LAYERS = (nn.MaxPool2d, nn.AvgPool2d, nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool2d)


def first_pooling_layer(network: nn.Module) -> Optional[str]:
    for name, module in network.named_modules():
        if isinstance(module, POOLING_LAYERS):
            return name
    return None


class ModelHandle:
    """A differentiable model plus the metadata attacks need: task, input spec and feature tap.

    The tap output is captured by a forward hook into thread-local storage, so a single
    handle can be shared by concurrent workers.
    """

    def __init__(
        self,
        network: nn.Module,
        model_id: str,
        task: Task,
        input_spec: InputSpec,
        feature_tap: Optional[str] = None,
    ):
        self.network = network.eval()
        self.model_id = model_id
        self.task = Task(task)
        self.input_spec = input_spec

        modules = dict(network.named_modules())
        tap = feature_tap or first_pooling_layer(network)
        if tap is None or tap not in modules or tap == "":
            raise ConfigurationError(f"{model_id}: feature tap {feature_tap!r} does not resolve to a layer")
        self.feature_tap = tap
        self._local = threading.local()
        modules[tap].register_forward_hook(self._capture)

    def _capture(self, module, inputs, output):
        self._local.features = output

    def __repr__(self) -> str:
        return f"ModelHandle({self.model_id!r}, task={self.task.value}, tap={self.feature_tap!r})"

    @property
    def dtype(self) -> torch.dtype:
        return next(self.network.parameters()).dtype

    def check_input(self, image: torch.Tensor) -> None:
        spec = self.input_spec
        if image.dim() != 3:
            raise DimensionError(f"{self.model_id}: expected HxWxC image, got shape {tuple(image.shape)}")
        h, w, c = image.shape
        if c != spec.channels:
            raise DimensionError(f"{self.model_id}: expected {spec.channels} channels, got {c}")
        if (spec.height is not None and h != spec.height) or (spec.width is not None and w != spec.width):
            raise DimensionError(f"{self.model_id}: expected {spec.height}x{spec.width} input, got {h}x{w}")
        if h % spec.stride or w % spec.stride:
            raise DimensionError(f"{self.model_id}: input {h}x{w} not divisible by stride {spec.stride}")

    def prepare(self, images: torch.Tensor) -> torch.Tensor:
        """(N, H, W, C) pixel images -> normalized (N, C, H, W) network input."""
        spec = self.input_spec
        mean = torch.tensor(spec.mean, dtype=self.dtype)
        std = torch.tensor(spec.std, dtype=self.dtype)
        x = (images.to(self.dtype) / spec.scale - mean) / std
        return x.permute(0, 3, 1, 2)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (logits, tap features), both channel-last and without the batch axis."""
        self.check_input(image)
        out = self.network(self.prepare(image.unsqueeze(0)))
        features = self._local.features
        self._local.features = None
        if self.task == Task.classification:
            logits = out.reshape(-1)
        else:
            logits = out[0].permute(1, 2, 0)
        return logits, features[0].permute(1, 2, 0)


def predict_logits(model: ModelHandle, image: torch.Tensor) -> torch.Tensor:
    """n_v scores for classification, an (h', w', n_v) map for segmentation."""
    with torch.no_grad():
        logits, _ = model.forward(image)
    return logits


def extract_features(model: ModelHandle, image: torch.Tensor) -> torch.Tensor:
    """(n_r, n_c, n_k) activations at the model's feature tap."""
    with torch.no_grad():
        _, features = model.forward(image)
    return features


def evaluate_loss(
    model: ModelHandle,
    loss: LossSpec,
    image: torch.Tensor,
    label: Optional[Label] = None,
    virtual_features: Optional[torch.Tensor] = None,
    valid_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Scalar loss at `image`, keeping the autograd graph."""
    if loss.kind.needs_virtual and virtual_features is None:
        raise ArgumentError(f"loss {loss.kind.value} needs virtual features")
    if loss.kind != LossKind.mix and label is None:
        raise ArgumentError(f"loss {loss.kind.value} needs a label")
    if loss.kind.segmentation != (model.task == Task.segmentation) and loss.kind != LossKind.mix:
        raise ArgumentError(f"loss {loss.kind.value} does not apply to a {model.task.value} model")

    logits, features = model.forward(image)
    if loss.kind == LossKind.mix:
        return mix_loss(features, virtual_features, loss.eps_floor)

    if loss.kind.segmentation:
        mask = valid_mask if loss.mask_background else None
        ce = seg_cross_entropy(logits, label, mask, loss.eps_floor)
    else:
        ce = cross_entropy(logits, label, loss.eps_floor)
    if loss.kind in (LossKind.ce, LossKind.seg_ce):
        return ce
    return total_loss(mix_loss(features, virtual_features, loss.eps_floor), ce, loss.beta)


def loss_and_gradient(
    model: ModelHandle,
    loss: LossSpec,
    image: torch.Tensor,
    label: Optional[Label] = None,
    virtual_features: Optional[torch.Tensor] = None,
    valid_mask: Optional[torch.Tensor] = None,
) -> tuple[float, torch.Tensor]:
    x = image.detach().to(model.dtype).clone().requires_grad_(True)
    value = evaluate_loss(model, loss, x, label, virtual_features, valid_mask)
    (grad,) = torch.autograd.grad(value, x)
    return value.item(), grad


def input_gradient(
    model: ModelHandle,
    loss: LossSpec,
    image: torch.Tensor,
    label: Optional[Label] = None,
    virtual_features: Optional[torch.Tensor] = None,
    valid_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Gradient of the loss w.r.t. the pixel-space image; same shape as the image."""
    return loss_and_gradient(model, loss, image, label, virtual_features, valid_mask)[1]


def resolve_model(model_id: str, registry: Optional[ModelRegistry] = None) -> ModelHandle:
    """Look a model id up in the registry, falling back to the built-in `toy:` ids.

    `toy:cls:<seed>[:<width>]` and `toy:seg:<seed>[:<width>]` build fresh reference models.
    """
    from . import reference_models

    registry = registry or ModelRegistry()
    entry = registry.models.get(model_id)
    if entry is not None:
        model = reference_models.build_architecture(
            entry.architecture,
            seed=entry.seed,
            width=entry.width,
            n_classes=entry.n_classes,
            model_id=model_id,
            feature_tap=entry.feature_tap,
            input_spec=entry.input_spec,
        )
        if entry.weights:
            reference_models.load_weights(model, entry.weights)
        logger.info("Resolved %s from registry (weights=%s)", model_id, entry.weights)
        return model

    parts = model_id.split(":")
    if len(parts) in (3, 4) and parts[0] == "toy" and parts[1] in ("cls", "seg"):
        try:
            seed = int(parts[2])
            width = int(parts[3]) if len(parts) == 4 else 8
        except ValueError as e:
            raise ConfigurationError(f"malformed toy model id {model_id!r}") from e
        architecture = "toy_classifier" if parts[1] == "cls" else "toy_segmenter"
        return reference_models.build_architecture(architecture, seed=seed, width=width, model_id=model_id)
    raise ConfigurationError(f"unknown model id {model_id!r}")

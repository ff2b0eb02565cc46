"""
Desk-scale differentiable models and synthetic datasets.

Everything here is float64 and seeded, so gradients can be checked against central finite
differences and trained weights are reproducible bit for bit.
"""
import hashlib
import logging
import math
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field
from torch import nn

from .config import InputSpec, LossSpec, Task
from .dataset_io import ImageDataset
from .errors import ArgumentError, ConfigurationError, TrainingError
from .model_interface import ModelHandle, evaluate_loss

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"MXAW"
WEIGHTS_VERSION = 1


class ToyRecipe(BaseModel):
    """The committed training recipe behind every toy fixture."""

    n_classes: int = 4
    n_per_class: int = 125
    n_test_per_class: int = 25
    size: int = 32
    epochs: int = 15
    lr: float = 0.001
    batch_size: int = 25
    amplitude: Tuple[float, float] = Field(default=(14.0, 20.0), description="grating amplitude range, pixels")
    noise_std: float = 6.0


TOY_RECIPE = ToyRecipe()


# -- Architectures ------------------------------------------------------------

def _init_uniform(network: nn.Module, seed: int) -> None:
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in network.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                bound = 1.0 / math.sqrt(module.weight[0].numel())
                module.weight.uniform_(-bound, bound, generator=generator)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=generator)


def toy_classifier_network(width: int = 8, n_classes: int = 4, size: int = 32, channels: int = 3) -> nn.Sequential:
    return nn.Sequential(
        OrderedDict(
            [
                ("conv1", nn.Conv2d(channels, width, 3, padding=1)),
                ("relu1", nn.ReLU()),
                ("pool1", nn.AvgPool2d(2)),
                ("conv2", nn.Conv2d(width, 2 * width, 3, padding=1)),
                ("relu2", nn.ReLU()),
                ("pool2", nn.AvgPool2d(2)),
                ("flatten", nn.Flatten()),
                ("fc", nn.Linear(2 * width * (size // 4) ** 2, n_classes)),
            ]
        )
    )


def toy_segmenter_network(width: int = 8, n_classes: int = 6, channels: int = 3) -> nn.Sequential:
    return nn.Sequential(
        OrderedDict(
            [
                ("conv1", nn.Conv2d(channels, width, 3, padding=1)),
                ("relu1", nn.ReLU()),
                ("pool1", nn.AvgPool2d(2)),
                ("conv2", nn.Conv2d(width, 2 * width, 3, padding=1)),
                ("relu2", nn.ReLU()),
                ("pool2", nn.AvgPool2d(2)),
                ("head", nn.Conv2d(2 * width, n_classes, 1)),
            ]
        )
    )


def make_toy_classifier(
    seed: int = 0,
    width: int = 8,
    n_classes: int = 4,
    size: int = 32,
    model_id: Optional[str] = None,
    feature_tap: Optional[str] = None,
) -> ModelHandle:
    network = toy_classifier_network(width, n_classes, size).double()
    _init_uniform(network, seed)
    return ModelHandle(
        network,
        model_id=model_id or f"toy:cls:{seed}:{width}",
        task=Task.classification,
        input_spec=InputSpec(height=size, width=size),
        feature_tap=feature_tap,
    )


def make_toy_segmenter(
    seed: int = 0,
    width: int = 8,
    n_classes: int = 6,
    model_id: Optional[str] = None,
    feature_tap: Optional[str] = None,
) -> ModelHandle:
    """Fully convolutional; logits come out at 1/4 of the input resolution."""
    network = toy_segmenter_network(width, n_classes).double()
    _init_uniform(network, seed)
    return ModelHandle(
        network,
        model_id=model_id or f"toy:seg:{seed}",
        task=Task.segmentation,
        input_spec=InputSpec(stride=4),
        feature_tap=feature_tap,
    )


def build_architecture(
    architecture: str,
    seed: int = 0,
    width: int = 8,
    n_classes: Optional[int] = None,
    model_id: Optional[str] = None,
    feature_tap: Optional[str] = None,
    input_spec: Optional[InputSpec] = None,
) -> ModelHandle:
    if architecture == "toy_classifier":
        size = input_spec.height if input_spec and input_spec.height else TOY_RECIPE.size
        return make_toy_classifier(seed, width, n_classes or TOY_RECIPE.n_classes, size, model_id, feature_tap)
    if architecture == "toy_segmenter":
        return make_toy_segmenter(seed, width, n_classes or 6, model_id, feature_tap)
    raise ConfigurationError(f"unknown architecture {architecture!r}")


# -- Synthetic data -----------------------------------------------------------

def _class_texture(k: int, size: int, phase: float, amplitude: float) -> np.ndarray:
    """Oriented sinusoidal grating for class k, (size, size, 3), zero mean."""
    theta = math.pi * (k % 4) / 4 + (k // 4) * math.pi / 12
    cycles = 6 + k % 3
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.sin(2 * math.pi * cycles * (xx * math.cos(theta) + yy * math.sin(theta)) / size + phase)
    gains = np.full(3, 0.6)
    gains[k % 3] = 1.0
    return amplitude * wave[:, :, None] * gains[None, None, :]


def make_synthetic(
    n_classes: int = 4,
    n_per_class: int = 125,
    size: int = 32,
    seed: int = 0,
    recipe: ToyRecipe = TOY_RECIPE,
) -> ImageDataset:
    """Balanced classification set of class-conditional gratings, regenerable from the seed.

    Classes differ in orientation, spatial frequency and channel gains. Images are
    interleaved by class and quantized to integers so they survive a PNG round trip.
    """
    if n_classes < 2:
        raise ArgumentError("need at least two classes")
    rng = np.random.default_rng(seed)
    images, labels, names = [], [], []
    for i in range(n_classes * n_per_class):
        k = i % n_classes
        amplitude = rng.uniform(*recipe.amplitude)
        phase = rng.uniform(0.0, 2 * math.pi)
        noise = rng.normal(0.0, recipe.noise_std, size=(size, size, 3))
        pixels = np.clip(np.rint(128.0 + _class_texture(k, size, phase, amplitude) + noise), 0, 255)
        images.append(torch.from_numpy(pixels))
        labels.append(k)
        names.append(f"img_{i:05d}.png")
    return ImageDataset(
        task=Task.classification,
        images=images,
        labels=labels,
        class_names=[f"class_{k:02d}" for k in range(n_classes)],
        names=names,
    )


def make_synthetic_segmentation(
    n_images: int = 8,
    size: int = 64,
    n_classes: int = 6,
    seed: int = 0,
    n_regions: int = 5,
    recipe: ToyRecipe = TOY_RECIPE,
) -> ImageDataset:
    """Scenes tiled by Voronoi regions, each filled with one class texture.

    The last class id is the background/clutter class and is excluded from valid pixels.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    images, labels, names = [], [], []
    for i in range(n_images):
        centers = rng.uniform(0, size, size=(n_regions, 2))
        region_class = rng.integers(0, n_classes, size=n_regions)
        dist = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
        label = region_class[np.argmin(dist, axis=0)]
        pixels = np.full((size, size, 3), 128.0)
        for k in range(n_classes):
            texture = _class_texture(k, size, rng.uniform(0, 2 * math.pi), rng.uniform(*recipe.amplitude))
            pixels = np.where((label == k)[:, :, None], pixels + texture, pixels)
        pixels = np.clip(np.rint(pixels + rng.normal(0.0, recipe.noise_std, size=pixels.shape)), 0, 255)
        images.append(torch.from_numpy(pixels))
        labels.append(torch.from_numpy(label.astype(np.int64)))
        names.append(f"scene_{i:03d}.png")
    return ImageDataset(
        task=Task.segmentation,
        images=images,
        labels=labels,
        class_names=[f"class_{k:02d}" for k in range(n_classes - 1)] + ["clutter"],
        names=names,
        background_class=n_classes - 1,
    )


def split_train_test(dataset: ImageDataset, fraction: float = 0.5, seed: int = 0) -> Tuple[ImageDataset, ImageDataset]:
    """Seeded split; classification splits each class separately so both halves stay balanced."""
    if not 0.0 < fraction < 1.0:
        raise ArgumentError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    if dataset.task == Task.classification:
        groups = [[i for i, y in enumerate(dataset.labels) if y == k] for k in range(dataset.n_classes)]
    else:
        groups = [list(range(len(dataset)))]
    train, test = [], []
    for group in groups:
        order = rng.permutation(len(group))
        cut = int(round(fraction * len(group)))
        train += [group[j] for j in order[:cut]]
        test += [group[j] for j in order[cut:]]
    return dataset.subset(sorted(train)), dataset.subset(sorted(test))


# -- Training -----------------------------------------------------------------

def train_toy(
    model: ModelHandle,
    dataset: ImageDataset,
    epochs: int = TOY_RECIPE.epochs,
    lr: float = TOY_RECIPE.lr,
    seed: int = 0,
    batch_size: int = TOY_RECIPE.batch_size,
) -> ModelHandle:
    """Mini-batch Adam on the dataset; updates the handle's weights in place and returns it."""
    if epochs <= 0 or len(dataset) == 0:
        return model
    network = model.network
    images = torch.stack(dataset.images)
    if dataset.task == Task.classification:
        targets = torch.tensor(dataset.labels, dtype=torch.long)
    else:
        targets = torch.stack(
            [torch.where(dataset.valid_mask(i), dataset.labels[i], -100) for i in range(len(dataset))]
        )
    inputs = model.prepare(images)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(network.parameters(), lr=lr)

    network.train()
    try:
        for epoch in range(epochs):
            order = torch.randperm(len(dataset), generator=generator)
            total = 0.0
            for start in range(0, len(order), batch_size):
                batch = order[start : start + batch_size]
                out = network(inputs[batch])
                if dataset.task == Task.segmentation:
                    out = F.interpolate(out, size=targets.shape[1:], mode="bilinear", align_corners=False)
                loss = F.cross_entropy(out, targets[batch], ignore_index=-100)
                if not torch.isfinite(loss):
                    raise TrainingError(f"{model.model_id}: loss diverged at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(batch)
            logger.debug("%s epoch %d loss %.4f", model.model_id, epoch, total / len(dataset))
    finally:
        network.eval()
    return model


def clean_accuracy(model: ModelHandle, dataset: ImageDataset) -> float:
    with torch.no_grad():
        logits = model.network(model.prepare(torch.stack(dataset.images)))
    predictions = logits.argmax(dim=1)
    return float((predictions == torch.tensor(dataset.labels)).double().mean())


# -- Finite differences -------------------------------------------------------

def sample_coordinates(shape: Sequence[int], n: int, seed: int = 0) -> List[Tuple[int, ...]]:
    rng = np.random.default_rng(seed)
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(n, total), replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, tuple(shape))) for i in sorted(flat)]


def finite_diff_gradient(
    model: Union[ModelHandle, Callable[[torch.Tensor], torch.Tensor]],
    loss: Optional[LossSpec],
    image: torch.Tensor,
    step: float = 1e-3,
    label=None,
    virtual_features: Optional[torch.Tensor] = None,
    valid_mask: Optional[torch.Tensor] = None,
    coords: Optional[Iterable[Tuple[int, ...]]] = None,
) -> torch.Tensor:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h.

    `model` is a ModelHandle evaluated with `loss`, or any scalar function of the image.
    Coordinates not listed in `coords` are left at zero; all coordinates by default.
    """
    if step <= 0:
        raise ArgumentError("step must be positive")
    if isinstance(model, ModelHandle):
        def objective(x):
            return evaluate_loss(model, loss, x, label, virtual_features, valid_mask)
    else:
        objective = model

    x = image.detach().to(torch.float64).clone()
    grad = torch.zeros_like(x)
    targets = coords if coords is not None else (tuple(i) for i in np.ndindex(*x.shape))
    with torch.no_grad():
        for index in targets:
            original = x[index].item()
            x[index] = original + step
            upper = float(objective(x))
            x[index] = original - step
            lower = float(objective(x))
            x[index] = original
            grad[index] = (upper - lower) / (2 * step)
    return grad


# -- Weight files -------------------------------------------------------------

def save_weights(model: ModelHandle, path: os.PathLike) -> Path:
    """Versioned flat binary: magic, version, tensor count, then per tensor a name + shape
    header followed by little-endian float64 data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.network.state_dict()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(state)))
        for name, tensor in state.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.dim()))
            fh.write(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
            fh.write(tensor.detach().cpu().numpy().astype("<f8").tobytes())
    return path


def load_weights(model: ModelHandle, path: os.PathLike) -> ModelHandle:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ConfigurationError(f"{path}: not a weight file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise ConfigurationError(f"{path}: unsupported weight file version {version}")
    offset = 12
    state = OrderedDict()
    for _ in range(count):
        (length,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + length].decode("utf-8")
        offset += length
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        array = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        state[name] = torch.from_numpy(array.copy())
    try:
        model.network.load_state_dict(state)
    except RuntimeError as e:
        raise ConfigurationError(f"{path}: weights do not fit {model.model_id}: {e}") from e
    return model


def file_checksum(path: os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

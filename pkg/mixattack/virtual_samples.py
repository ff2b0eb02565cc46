"""
Virtual images built from several training images: the n-way mean (mixup) or full-width
horizontal strips taken from each source in turn (mixcut).
"""
import logging
import os
from pathlib import Path
from typing import Iterable, List, Literal, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .config import Task
from .dataset_io import ImageDataset, save_image
from .errors import ArgumentError, CapacityError, DimensionError

logger = logging.getLogger(__name__)

VirtualMethod = Literal["mixup", "mixcut"]


class VirtualSampleSpec(BaseModel):
    method: VirtualMethod
    n_mix: int = Field(default=10, ge=2)
    source_ids: List[int] = Field(default_factory=list, description="dataset indices of the source images")
    seed: int = 0


class StripMask(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    row: int
    col: int = 0
    rows: int
    cols: int
    mask: torch.Tensor = Field(description="(h, w) binary mask, 1 inside the strip")


def select_sources(dataset: ImageDataset, n_mix: int, seed: int) -> List[int]:
    """Indices of the source images: one per class of the first n_mix sorted class names
    (classification) or n_mix distinct images (segmentation)."""
    rng = np.random.default_rng(seed)
    if dataset.task == Task.segmentation:
        if len(dataset) < n_mix:
            raise CapacityError(f"need {n_mix} images, dataset has {len(dataset)}")
        return [int(i) for i in rng.choice(len(dataset), size=n_mix, replace=False)]

    names = sorted(dataset.class_names)
    if len(names) < n_mix:
        raise CapacityError(f"need {n_mix} classes, dataset has {len(names)}")
    chosen = []
    for name in names[:n_mix]:
        k = dataset.class_names.index(name)
        members = [i for i, y in enumerate(dataset.labels) if y == k]
        if not members:
            raise CapacityError(f"class {name!r} has no images")
        chosen.append(int(members[rng.integers(len(members))]))
    return chosen


def pick_category_representatives(dataset: ImageDataset, n_mix: int, seed: int) -> List[torch.Tensor]:
    return [dataset.images[i] for i in select_sources(dataset, n_mix, seed)]


def resize_image(image: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of an (H, W, C) image."""
    if tuple(image.shape[:2]) == (height, width):
        return image
    x = image.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0)


def _check_same_shape(images: Sequence[torch.Tensor]) -> None:
    if not images:
        raise ArgumentError("no source images")
    shape = images[0].shape
    for image in images[1:]:
        if image.shape != shape:
            raise DimensionError(f"source shapes differ: {tuple(shape)} vs {tuple(image.shape)}")


def make_mixup(images: Sequence[torch.Tensor]) -> torch.Tensor:
    """Elementwise mean with weight 1/n_mix per source."""
    _check_same_shape(images)
    mean = images[0].clone()
    for k, image in enumerate(images[1:], start=2):
        mean += (image - mean) / k
    stacked = torch.stack(list(images))
    return torch.minimum(torch.maximum(mean, stacked.amin(dim=0)), stacked.amax(dim=0))


def mixcut_masks(h: int, w: int, n_mix: int) -> List[StripMask]:
    """Full-width strips; strip i covers rows [floor(i*h/n), floor((i+1)*h/n))."""
    if n_mix < 1 or h < n_mix:
        raise CapacityError(f"cannot cut {h} rows into {n_mix} strips")
    bounds = [(i * h) // n_mix for i in range(n_mix + 1)]
    masks = []
    for top, bottom in zip(bounds[:-1], bounds[1:]):
        mask = torch.zeros((h, w), dtype=torch.float64)
        mask[top:bottom] = 1.0
        masks.append(StripMask(row=top, rows=bottom - top, cols=w, mask=mask))
    return masks


def make_mixcut(images: Sequence[torch.Tensor]) -> torch.Tensor:
    """Rows of strip i are copied verbatim from image i."""
    _check_same_shape(images)
    h, w = images[0].shape[:2]
    out = torch.empty_like(images[0])
    for strip, image in zip(mixcut_masks(h, w, len(images)), images):
        out[strip.row : strip.row + strip.rows] = image[strip.row : strip.row + strip.rows]
    return out


def build_virtual_sample(
    dataset: ImageDataset,
    method: VirtualMethod,
    n_mix: int,
    seed: int,
    size: Tuple[int, int],
) -> Tuple[torch.Tensor, VirtualSampleSpec]:
    """Select sources, resize them to `size` and combine with the chosen sampler."""
    if method not in ("mixup", "mixcut"):
        raise ArgumentError(f"unknown virtual sample method {method!r}")
    ids = select_sources(dataset, n_mix, seed)
    sources = [resize_image(dataset.images[i].to(torch.float64), *size) for i in ids]
    virtual = make_mixup(sources) if method == "mixup" else make_mixcut(sources)
    logger.debug("Built %s virtual sample from %s", method, ids)
    return virtual, VirtualSampleSpec(method=method, n_mix=n_mix, source_ids=ids, seed=seed)


def export_virtual_gallery(
    dataset: ImageDataset,
    method: VirtualMethod,
    n_mix_values: Iterable[int],
    seed: int,
    size: Tuple[int, int],
    out_dir: os.PathLike,
) -> List[Path]:
    """One PNG per n_mix value, for eyeballing how the virtual sample changes with n_mix."""
    paths = []
    for n_mix in n_mix_values:
        virtual, _ = build_virtual_sample(dataset, method, n_mix, seed, size)
        paths.append(save_image(virtual, Path(out_dir) / f"{method}_nmix{n_mix:02d}.png"))
    return paths

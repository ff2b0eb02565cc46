"""
Scalar attack objectives.

All functions take and return torch tensors so they can sit inside an autograd graph.
Feature maps and logit maps use channel-last layout: (rows, cols, channels).
"""
import math
from typing import Optional, Union

import torch
import torch.nn.functional as F

from .config import EPS_FLOOR
from .errors import ArgumentError, DimensionError

Label = Union[int, torch.Tensor]


def _normalized(features: torch.Tensor, eps_floor: float) -> torch.Tensor:
    floored = torch.clamp(features.reshape(-1), min=eps_floor)
    return floored / floored.sum()


def mix_loss(f_x: torch.Tensor, f_virtual: torch.Tensor, eps_floor: float = EPS_FLOOR) -> torch.Tensor:
    """Negative KL divergence between the unit-sum normalized feature maps.

    Always <= 0, and exactly 0 when both maps normalize to the same distribution.
    """
    if f_x.shape != f_virtual.shape:
        raise DimensionError(f"feature shapes differ: {tuple(f_x.shape)} vs {tuple(f_virtual.shape)}")
    p = _normalized(f_x, eps_floor)
    q = _normalized(f_virtual, eps_floor)
    return -(p * (torch.log(p) - torch.log(q))).sum()


def _class_index(y: Label, n_classes: int) -> int:
    if isinstance(y, torch.Tensor) and y.dim() > 0:
        if y.dim() != 1 or y.numel() != n_classes:
            raise ArgumentError(f"one-hot label must have {n_classes} entries, got shape {tuple(y.shape)}")
        ones = y == 1
        if int(ones.sum()) != 1 or not bool(((y == 0) | ones).all()):
            raise ArgumentError("label is not one-hot")
        return int(torch.argmax(y.to(torch.float64)))
    k = int(y)
    if not 0 <= k < n_classes:
        raise ArgumentError(f"class id {k} outside [0, {n_classes})")
    return k


def cross_entropy(logits: torch.Tensor, y: Label, eps_floor: float = EPS_FLOOR) -> torch.Tensor:
    """-ln softmax(logits)[k] for the true class k; y is a class id or a one-hot vector."""
    k = _class_index(y, logits.shape[-1])
    log_p = torch.log_softmax(logits.reshape(-1), dim=0)[k]
    return -torch.clamp(log_p, min=math.log(eps_floor))


def bilinear_upsample(score_map: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Bilinear upsampling with half-pixel centers and edge clamping.

    Accepts (rows, cols) or (rows, cols, channels) maps.
    """
    squeeze = score_map.dim() == 2
    m = score_map.unsqueeze(-1) if squeeze else score_map
    src_h, src_w = m.shape[0], m.shape[1]
    if h < src_h or w < src_w:
        raise ArgumentError(f"cannot downscale {src_h}x{src_w} to {h}x{w}")
    if (h, w) == (src_h, src_w):
        return score_map
    up = F.interpolate(m.permute(2, 0, 1).unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False)
    up = up.squeeze(0).permute(1, 2, 0)
    return up.squeeze(-1) if squeeze else up


def seg_cross_entropy(
    logit_map: torch.Tensor,
    label_map: torch.Tensor,
    valid_mask: Optional[torch.Tensor] = None,
    eps_floor: float = EPS_FLOOR,
) -> torch.Tensor:
    """Per-pixel cross-entropy summed over valid pixels after upsampling to the label size."""
    h, w = label_map.shape
    n_v = logit_map.shape[-1]
    if valid_mask is None:
        valid_mask = torch.ones_like(label_map, dtype=torch.bool)
    elif valid_mask.shape != label_map.shape:
        raise DimensionError(f"mask shape {tuple(valid_mask.shape)} != label shape {tuple(label_map.shape)}")
    valid_mask = valid_mask.to(torch.bool)
    labels = label_map.to(torch.long)
    if not bool(valid_mask.any()):
        return logit_map.sum() * 0.0
    if int(labels[valid_mask].max()) >= n_v or int(labels[valid_mask].min()) < 0:
        raise ArgumentError(f"label ids must lie in [0, {n_v})")

    log_p = torch.log_softmax(bilinear_upsample(logit_map, h, w), dim=-1)
    picked = torch.gather(log_p, -1, torch.where(valid_mask, labels, 0).unsqueeze(-1)).squeeze(-1)
    picked = torch.clamp(picked, min=math.log(eps_floor))
    return -(picked * valid_mask.to(picked.dtype)).sum()


def total_loss(mix: torch.Tensor, ce: torch.Tensor, beta: float) -> torch.Tensor:
    if beta < 0:
        raise ArgumentError(f"beta must be nonnegative, got {beta}")
    return mix + beta * ce

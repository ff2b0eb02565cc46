"""
Success rate, overall accuracy and per-class F1.

Classification counts images; segmentation counts valid pixels. Misclassification is
judged against ground truth, not against the victim's clean predictions.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field

from .errors import ArgumentError, DimensionError, UndefinedMetricError

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence[int]]


def _flat(values: Union[ArrayLike, Sequence[ArrayLike]]) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy().reshape(-1)
    if isinstance(values, (list, tuple)) and values and isinstance(values[0], (torch.Tensor, np.ndarray)):
        return np.concatenate([_flat(v) for v in values])
    return np.asarray(values).reshape(-1)


def _valid_pairs(predictions, labels, valid_mask=None) -> Tuple[np.ndarray, np.ndarray]:
    pred = _flat(predictions).astype(np.int64)
    true = _flat(labels).astype(np.int64)
    if pred.shape != true.shape:
        raise DimensionError(f"{pred.size} predictions for {true.size} labels")
    if valid_mask is not None:
        mask = _flat(valid_mask).astype(bool)
        if mask.shape != true.shape:
            raise DimensionError(f"mask covers {mask.size} entries, labels {true.size}")
        pred, true = pred[mask], true[mask]
    return pred, true


def count_wrong(predictions, labels, valid_mask=None) -> Tuple[int, int]:
    """(n_wrong, n_total) over valid entries."""
    pred, true = _valid_pairs(predictions, labels, valid_mask)
    return int((pred != true).sum()), int(true.size)


def success_rate(predictions, labels, valid_mask=None) -> float:
    n_wrong, n_total = count_wrong(predictions, labels, valid_mask)
    if n_total == 0:
        raise UndefinedMetricError("success rate over zero valid entries")
    return n_wrong / n_total


def overall_accuracy(predictions, labels, valid_mask=None) -> float:
    return 1.0 - success_rate(predictions, labels, valid_mask)


def confusion_matrix(predictions, labels, n_v: int, valid_mask=None) -> np.ndarray:
    """(n_v, n_v) counts, rows indexed by ground truth."""
    pred, true = _valid_pairs(predictions, labels, valid_mask)
    if pred.size and (max(pred.max(), true.max()) >= n_v or min(pred.min(), true.min()) < 0):
        raise ArgumentError(f"class ids must lie in [0, {n_v})")
    return np.bincount(n_v * true + pred, minlength=n_v * n_v).reshape(n_v, n_v)


def f1_scores(
    predictions, labels, n_v: int, valid_mask=None, ignore_class: Optional[int] = None
) -> Tuple[List[Optional[float]], float]:
    """Per-class F1 and their mean.

    Classes absent from both predictions and labels are reported as None and left out of
    the mean, as is `ignore_class` (the background/clutter id). Valid pixels predicted as
    `ignore_class` still count against the recall of their true class.
    """
    hist = confusion_matrix(predictions, labels, n_v, valid_mask)
    if hist.sum() == 0:
        raise UndefinedMetricError("F1 over zero valid entries")
    tp = np.diag(hist).astype(np.float64)
    fp = hist.sum(axis=0) - tp
    fn = hist.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2 * tp / denom, np.nan)
    if ignore_class is not None and 0 <= ignore_class < n_v:
        f1[ignore_class] = np.nan
    if np.isnan(f1).all():
        raise UndefinedMetricError("no scored class left for F1")
    per_class = [None if np.isnan(v) else float(v) for v in f1]
    return per_class, float(np.nanmean(f1))


class EvalReport(BaseModel):
    victim: str
    surrogate: Optional[str] = None
    method: str = Field(default="clean", description="attack method, or 'clean' for the unattacked set")
    success_rate: float = Field(ge=0.0, le=1.0)
    overall_accuracy: float = Field(ge=0.0, le=1.0)
    n_wrong: int
    n_correct: int
    n_total: int
    per_class_f1: Optional[List[Optional[float]]] = None
    mean_f1: Optional[float] = None
    resized: bool = Field(default=False, description="inputs were resized to the victim's input spec")
    config: Dict[str, Any] = Field(default_factory=dict)

    def row(self) -> Dict[str, Any]:
        """Flat record for CSV / table output."""
        return {
            "surrogate": self.surrogate or "",
            "method": self.method,
            "victim": self.victim,
            "success_rate": self.success_rate,
            "overall_accuracy": self.overall_accuracy,
            "mean_f1": self.mean_f1,
            "n_wrong": self.n_wrong,
            "n_total": self.n_total,
            "resized": self.resized,
        }


def build_report(
    predictions,
    labels,
    victim: str,
    n_v: Optional[int] = None,
    valid_mask=None,
    background_class: Optional[int] = None,
    **kwargs,
) -> EvalReport:
    """EvalReport from raw predictions; F1 fields are filled when n_v is given."""
    n_wrong, n_total = count_wrong(predictions, labels, valid_mask)
    if n_total == 0:
        raise UndefinedMetricError(f"{victim}: no valid entries to evaluate")
    if n_v:
        per_class, mean_f1 = f1_scores(predictions, labels, n_v, valid_mask, ignore_class=background_class)
    else:
        per_class, mean_f1 = None, None
    sr = n_wrong / n_total
    return EvalReport(
        victim=victim,
        success_rate=sr,
        overall_accuracy=1.0 - sr,
        n_wrong=n_wrong,
        n_correct=n_total - n_wrong,
        n_total=n_total,
        per_class_f1=per_class,
        mean_f1=mean_f1,
        **kwargs,
    )

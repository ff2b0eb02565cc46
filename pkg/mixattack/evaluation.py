"""
Surrogate -> victim transfer evaluation, module ablations and the beta sweep.

Adversarial sets are generated once per (surrogate, method) and then scored by every
victim. Every matrix also carries a `clean` row: each victim on the unattacked images, so
clean error can be subtracted from the success rate.
"""
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Collection, Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field

from .attacks import AttackResult, attack_batch
from .config import AttackConfig, AttackMethod, Task, make_attack_config
from .dataset_io import ImageDataset
from .errors import ArgumentError
from .losses import bilinear_upsample
from .metrics import EvalReport, build_report
from .model_interface import ModelHandle, predict_logits
from .reference_models import TOY_RECIPE, make_synthetic, make_toy_classifier, split_train_test, train_toy
from .virtual_samples import resize_image

logger = logging.getLogger(__name__)

ABLATION_TOGGLES = frozenset({"ce", "mix", "momentum"})


# -- Prediction ---------------------------------------------------------------

def _fit_to_spec(model: ModelHandle, image: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    spec = model.input_spec
    h, w = image.shape[0], image.shape[1]
    th = spec.height or (h // spec.stride) * spec.stride
    tw = spec.width or (w // spec.stride) * spec.stride
    if (th, tw) == (h, w):
        return image, False
    return resize_image(image.to(model.dtype), th, tw), True


def predict_labels(model: ModelHandle, dataset: ImageDataset) -> Tuple[List[Any], bool]:
    """Class ids (classification) or full-resolution label maps (segmentation).

    Images that do not match the model's input spec are resized to it; the second return
    value says whether that happened.
    """
    predictions, resized = [], False
    for image in dataset.images:
        fitted, changed = _fit_to_spec(model, image)
        resized |= changed
        logits = predict_logits(model, fitted)
        if model.task == Task.classification:
            predictions.append(int(torch.argmax(logits)))
        else:
            full = bilinear_upsample(logits, image.shape[0], image.shape[1])
            predictions.append(torch.argmax(full, dim=-1))
    if resized:
        logger.warning("%s: inputs resized to the model's input spec", model.model_id)
    return predictions, resized


def evaluate_predictions(model: ModelHandle, dataset: ImageDataset, **kwargs) -> EvalReport:
    """Score `model` on `dataset` against its ground truth."""
    predictions, resized = predict_labels(model, dataset)
    if dataset.task == Task.segmentation:
        masks = [dataset.valid_mask(i) for i in range(len(dataset))]
        return build_report(
            predictions,
            dataset.labels,
            model.model_id,
            n_v=dataset.n_classes or None,
            valid_mask=masks,
            background_class=dataset.background_class,
            resized=resized,
            **kwargs,
        )
    return build_report(predictions, dataset.labels, model.model_id, resized=resized, **kwargs)


# -- Transfer matrix ----------------------------------------------------------

class TransferMatrix(BaseModel):
    surrogate: str
    victims: List[str]
    reports: List[EvalReport] = Field(default_factory=list)

    @property
    def methods(self) -> List[str]:
        return list(dict.fromkeys(r.method for r in self.reports))

    def cell(self, method: str, victim: str) -> EvalReport:
        for report in self.reports:
            if report.method == method and report.victim == victim:
                return report
        raise KeyError((method, victim))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.row() for r in self.reports])


def _score_victims(
    victims: Sequence[ModelHandle], dataset: ImageDataset, jobs: int, **kwargs
) -> List[EvalReport]:
    def score(victim: ModelHandle) -> EvalReport:
        return evaluate_predictions(victim, dataset, **kwargs)

    if jobs <= 1 or len(victims) <= 1:
        return [score(v) for v in victims]
    with ThreadPoolExecutor(max_workers=min(jobs, len(victims))) as pool:
        return list(pool.map(score, victims))


def adversarial_dataset(dataset: ImageDataset, results: Sequence[AttackResult]) -> ImageDataset:
    return dataset.with_images([r.adversarial for r in results])


def evaluate_transfer(
    surrogate: ModelHandle,
    victims: Sequence[ModelHandle],
    dataset: ImageDataset,
    configs: Iterable[AttackConfig],
    virtual: Optional[torch.Tensor] = None,
    *,
    virtual_source: Optional[ImageDataset] = None,
    jobs: int = 1,
) -> TransferMatrix:
    """One row per attack config plus the clean row, one column per victim."""
    if not victims:
        raise ArgumentError("need at least one victim")
    matrix = TransferMatrix(surrogate=surrogate.model_id, victims=[v.model_id for v in victims])
    matrix.reports += _score_victims(victims, dataset, jobs, surrogate=surrogate.model_id, method="clean")
    for config in configs:
        results = attack_batch(surrogate, dataset, config, virtual, virtual_source=virtual_source, jobs=jobs)
        adversarial = adversarial_dataset(dataset, results)
        echo = config.model_dump(mode="json")
        matrix.reports += _score_victims(
            victims, adversarial, jobs, surrogate=surrogate.model_id, method=config.method.value, config=echo
        )
        logger.info("%s -> %s done", surrogate.model_id, config.method.value)
    return matrix


# -- Ablation and beta sweep ----------------------------------------------------

def toggle_label(toggles: Collection[str]) -> str:
    order = ["ce", "mix", "momentum"]
    return "+".join(t for t in order if t in toggles)


def ablation_config(toggles: Collection[str], method: AttackMethod, base: AttackConfig) -> AttackConfig:
    """Attack config for one toggle combination; the CE-only row is plain I-FGSM."""
    toggles = set(toggles)
    if not toggles:
        raise ArgumentError("empty toggle set")
    unknown = toggles - ABLATION_TOGGLES
    if unknown:
        raise ArgumentError(f"unknown toggles {sorted(unknown)}")
    if not toggles & {"ce", "mix"}:
        raise ArgumentError("toggles must include a loss term (ce or mix)")
    if toggles == {"ce"}:
        return base.model_copy(update={"method": AttackMethod.ifgsm})
    return base.model_copy(
        update={
            "method": AttackMethod(method),
            "include_ce": "ce" in toggles,
            "include_mix": "mix" in toggles,
            "momentum": "momentum" in toggles,
        }
    )


def ablation_run(
    surrogate: ModelHandle,
    victim: ModelHandle,
    dataset: ImageDataset,
    toggles: Sequence[Collection[str]],
    method: AttackMethod = AttackMethod.mixup,
    base_config: Optional[AttackConfig] = None,
    virtual: Optional[torch.Tensor] = None,
    *,
    virtual_source: Optional[ImageDataset] = None,
    jobs: int = 1,
) -> List[EvalReport]:
    """One victim report per toggle combination."""
    if not toggles:
        raise ArgumentError("no toggle combinations given")
    method = AttackMethod(method)
    base = base_config or make_attack_config(method=method)
    reports = []
    for combination in toggles:
        config = ablation_config(combination, method, base)
        results = attack_batch(surrogate, dataset, config, virtual, virtual_source=virtual_source, jobs=jobs)
        reports.append(
            evaluate_predictions(
                victim,
                adversarial_dataset(dataset, results),
                surrogate=surrogate.model_id,
                method=toggle_label(combination),
                config=config.model_dump(mode="json"),
            )
        )
    return reports


def beta_sweep(
    surrogate: ModelHandle,
    victim: ModelHandle,
    dataset: ImageDataset,
    betas: Sequence[float],
    method: AttackMethod = AttackMethod.mixup,
    base_config: Optional[AttackConfig] = None,
    virtual: Optional[torch.Tensor] = None,
    *,
    virtual_source: Optional[ImageDataset] = None,
    jobs: int = 1,
) -> List[EvalReport]:
    """Victim success rate of the mix attack for each CE weight."""
    method = AttackMethod(method)
    base = base_config or make_attack_config(method=method)
    reports = []
    for beta in betas:
        config = make_attack_config(**{**base.model_dump(), "method": method, "beta": beta})
        results = attack_batch(surrogate, dataset, config, virtual, virtual_source=virtual_source, jobs=jobs)
        reports.append(
            evaluate_predictions(
                victim,
                adversarial_dataset(dataset, results),
                surrogate=surrogate.model_id,
                method=f"{method.value}@beta={beta:g}",
                config=config.model_dump(mode="json"),
            )
        )
    return reports


class GapRow(BaseModel):
    victim: str
    metric: str = Field(description="OA for classification, mF1 for segmentation")
    clean: float
    adversarial: float
    delta: float


def robustness_gap(
    victims: Sequence[ModelHandle], clean: ImageDataset, adversarial: ImageDataset
) -> List[GapRow]:
    """Clean vs adversarial performance per victim on the same records."""
    rows = []
    for victim in victims:
        before = evaluate_predictions(victim, clean)
        after = evaluate_predictions(victim, adversarial)
        if clean.task == Task.segmentation:
            metric, a, b = "mF1", before.mean_f1, after.mean_f1
        else:
            metric, a, b = "OA", before.overall_accuracy, after.overall_accuracy
        rows.append(GapRow(victim=victim.model_id, metric=metric, clean=a, adversarial=b, delta=b - a))
    return rows


# -- Output -------------------------------------------------------------------

def write_reports(reports: Sequence[EvalReport], out_dir: os.PathLike, stem: str = "report") -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}.csv"
    json_path.write_text(json.dumps([r.model_dump(mode="json") for r in reports], indent=2))
    pd.DataFrame([r.row() for r in reports]).to_csv(csv_path, index=False)
    return json_path, csv_path


def format_table(reports: Sequence[EvalReport], value: str = "success_rate") -> str:
    """Rows are surrogate/method, columns are victims, cells in percent."""
    if not reports:
        return "(no reports)"
    frame = pd.DataFrame([r.row() for r in reports])
    frame["row"] = frame["surrogate"].where(frame["surrogate"] == "", frame["surrogate"] + " / ") + frame["method"]
    table = frame.pivot_table(index="row", columns="victim", values=value, aggfunc="first", sort=False)
    return (table * 100).round(2).to_string()


# -- Advisory harness -------------------------------------------------------------

class AdvisoryReport(BaseModel):
    name: str
    wins: int
    total: int
    required: int
    rows: List[Dict[str, Any]] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.wins >= self.required

    def warn_if_failed(self) -> None:
        if not self.passed:
            warnings.warn(f"{self.name}: {self.wins}/{self.total} pairs won, {self.required} required: {self.rows}")


class TransferPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    surrogate: ModelHandle
    victim: ModelHandle
    test: ImageDataset
    virtual_source: ImageDataset


def build_transfer_pair(seed: int, n_test: int = 100, epochs: int = TOY_RECIPE.epochs) -> TransferPair:
    """Surrogate and victim toy classifiers trained on the same data with different seed and width."""
    data = make_synthetic(TOY_RECIPE.n_classes, TOY_RECIPE.n_per_class, TOY_RECIPE.size, seed=seed)
    train, test = split_train_test(data, fraction=0.8, seed=seed)
    surrogate = train_toy(make_toy_classifier(seed=seed, width=8), train, epochs=epochs, seed=seed)
    victim = train_toy(make_toy_classifier(seed=seed + 100, width=12), train, epochs=epochs, seed=seed + 100)
    source = make_synthetic(10, 2, TOY_RECIPE.size, seed=seed + 1000)
    test = test.subset(range(min(n_test, len(test))))
    return TransferPair(surrogate=surrogate, victim=victim, test=test, virtual_source=source)


def transfer_ordering_check(seeds: Sequence[int] = (0, 1, 2, 3, 4), required: int = 4, **pair_kwargs) -> AdvisoryReport:
    """Does the mixup attack transfer at least as well as I-FGSM on each seed pair?"""
    rows, wins = [], 0
    for seed in seeds:
        pair = build_transfer_pair(seed, **pair_kwargs)
        configs = [make_attack_config(method="ifgsm", seed=seed), make_attack_config(method="mixup", seed=seed)]
        matrix = evaluate_transfer(pair.surrogate, [pair.victim], pair.test, configs, virtual_source=pair.virtual_source)
        ifgsm_sr = matrix.cell("ifgsm", pair.victim.model_id).success_rate
        mixup_sr = matrix.cell("mixup", pair.victim.model_id).success_rate
        wins += mixup_sr >= ifgsm_sr
        rows.append({"seed": seed, "ifgsm": ifgsm_sr, "mixup": mixup_sr})
    return AdvisoryReport(name="transfer ordering", wins=wins, total=len(seeds), required=required, rows=rows)


def ablation_ordering_check(seeds: Sequence[int] = (0, 1, 2, 3, 4), required: int = 4, **pair_kwargs) -> AdvisoryReport:
    """Does adding the mix loss to CE raise transfer success rate on each seed pair?"""
    rows, wins = [], 0
    for seed in seeds:
        pair = build_transfer_pair(seed, **pair_kwargs)
        ce_only, with_mix = ablation_run(
            pair.surrogate,
            pair.victim,
            pair.test,
            [{"ce"}, {"ce", "mix"}],
            base_config=make_attack_config(method="mixup", seed=seed, momentum=False),
            virtual_source=pair.virtual_source,
        )
        wins += with_mix.success_rate >= ce_only.success_rate
        rows.append({"seed": seed, "ce": ce_only.success_rate, "ce+mix": with_mix.success_rate})
    return AdvisoryReport(name="ablation ordering", wins=wins, total=len(seeds), required=required, rows=rows)

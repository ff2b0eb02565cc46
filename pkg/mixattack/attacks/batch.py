import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

import numpy as np
import torch

from ..config import AttackConfig, AttackMethod
from ..dataset_io import ImageDataset
from ..errors import ArgumentError
from ..losses import Label
from ..model_interface import ModelHandle
from ..virtual_samples import build_virtual_sample
from .common import AttackResult
from .gradient_attacks import cw_attack, fgsm, ifgsm
from .mix_attack import mix_attack

logger = logging.getLogger(__name__)

FGSM_NORMS = {
    AttackMethod.fgsm: "sign",
    AttackMethod.fgsm_l2: "l2",
    AttackMethod.fgsm_linf: "linf",
}


def run_attack(
    model: ModelHandle,
    image: torch.Tensor,
    label: Label,
    config: AttackConfig,
    virtual: Optional[torch.Tensor] = None,
    valid_mask: Optional[torch.Tensor] = None,
) -> AttackResult:
    """Dispatch one image to the generator named by config.method."""
    method = config.method
    if method in FGSM_NORMS:
        result = fgsm(model, image, label, config.epsilon, FGSM_NORMS[method], valid_mask)
    elif method == AttackMethod.ifgsm:
        result = ifgsm(model, image, label, config.alpha, config.iterations, valid_mask)
    elif method == AttackMethod.cw:
        result = cw_attack(model, image, label, config.mu, config.alpha, config.iterations, valid_mask)
    elif method.uses_virtual:
        return mix_attack(model, image, label, virtual, config, valid_mask)
    else:
        raise ArgumentError(f"unsupported attack method {method!r}")
    return result.model_copy(update={"config": config.model_dump(mode="json")})


def image_seed(seed: int, index: int) -> int:
    """Independent per-image RNG stream derived from (seed, index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def attack_batch(
    model: ModelHandle,
    dataset: ImageDataset,
    config: AttackConfig,
    virtual: Optional[torch.Tensor] = None,
    *,
    virtual_source: Optional[ImageDataset] = None,
    jobs: int = 1,
) -> List[AttackResult]:
    """Attack every image independently; results come back in input order.

    A failure on one image is recorded on its result (`error`, unperturbed image) and the
    batch carries on. With `config.resample_virtual` a fresh virtual sample is drawn from
    `virtual_source` for each image.
    """
    if jobs < 1:
        raise ArgumentError(f"jobs must be >= 1, got {jobs}")
    needs_virtual = config.method.uses_virtual and config.include_mix
    if needs_virtual and config.resample_virtual and virtual_source is None:
        raise ArgumentError("resample_virtual needs a virtual source dataset")
    if needs_virtual and virtual is None and not config.resample_virtual:
        if virtual_source is None:
            raise ArgumentError(f"{config.method.value} attack needs a virtual sample or a virtual source")
        size = tuple(dataset.images[0].shape[:2]) if len(dataset) else (1, 1)
        virtual, _ = build_virtual_sample(virtual_source, config.method.value, config.n_mix, config.seed, size)

    def attack_one(index: int) -> AttackResult:
        image = dataset.images[index]
        name = dataset.names[index] if dataset.names else None
        try:
            v = virtual
            if needs_virtual and config.resample_virtual:
                v, _ = build_virtual_sample(
                    virtual_source,
                    config.method.value,
                    config.n_mix,
                    image_seed(config.seed, index),
                    tuple(image.shape[:2]),
                )
            result = run_attack(model, image, dataset.labels[index], config, v, dataset.valid_mask(index))
            return result.model_copy(update={"name": name})
        except Exception as e:
            logger.error("Attack on %s failed: %s", name or index, e)
            return AttackResult.failed(image, str(e), name=name, config=config.model_dump(mode="json"))

    if jobs == 1:
        results = [attack_one(i) for i in range(len(dataset))]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(attack_one, range(len(dataset))))
    failures = sum(r.error is not None for r in results)
    logger.info("Attacked %d images with %s (%d failed)", len(results), config.method.value, failures)
    return results

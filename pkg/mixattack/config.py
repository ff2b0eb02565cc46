import os
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError

load_dotenv()

DEFAULT_BETAS = {"mixup": 0.0005, "mixcut": 0.005}
EPS_FLOOR = 1e-12


class Task(str, Enum):
    classification = "classification"
    segmentation = "segmentation"


class AttackMethod(str, Enum):
    fgsm = "fgsm"
    fgsm_l2 = "fgsm_l2"
    fgsm_linf = "fgsm_linf"
    ifgsm = "ifgsm"
    cw = "cw"
    mixup = "mixup"
    mixcut = "mixcut"

    @property
    def uses_virtual(self) -> bool:
        return self in (AttackMethod.mixup, AttackMethod.mixcut)

    @property
    def single_step(self) -> bool:
        return self in (AttackMethod.fgsm, AttackMethod.fgsm_l2, AttackMethod.fgsm_linf)


class LossKind(str, Enum):
    mix = "mix"
    ce = "ce"
    seg_ce = "seg_ce"
    total = "total"
    total_seg = "total_seg"

    @property
    def needs_virtual(self) -> bool:
        return self in (LossKind.mix, LossKind.total, LossKind.total_seg)

    @property
    def segmentation(self) -> bool:
        return self in (LossKind.seg_ce, LossKind.total_seg)


class InputSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    height: Optional[int] = Field(default=None, description="Expected image height in pixels, None for any")
    width: Optional[int] = Field(default=None, description="Expected image width in pixels, None for any")
    channels: int = Field(default=3, description="Number of image channels (3 for RGB/IRRG)")
    scale: float = Field(default=255.0, description="Pixel values are divided by this before normalization")
    mean: Tuple[float, ...] = Field(default=(0.0, 0.0, 0.0), description="Per-channel mean subtracted after scaling")
    std: Tuple[float, ...] = Field(default=(1.0, 1.0, 1.0), description="Per-channel std divided after scaling")
    stride: int = Field(default=1, description="Fully convolutional models need H and W divisible by this")


class LossSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: LossKind = Field(description="mix | ce | seg_ce | total | total_seg")
    beta: float = Field(default=0.0005, ge=0.0, description="Weight of the cross-entropy term in the totals")
    eps_floor: float = Field(default=EPS_FLOOR, gt=0.0, description="Floor applied before every logarithm")
    mask_background: bool = Field(default=True, description="Exclude invalid pixels from segmentation CE")


class AttackConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: AttackMethod = Field(default=AttackMethod.mixcut, description="Perturbation generator")
    epsilon: float = Field(default=1.0, gt=0.0, description="Single-step budget in pixel units")
    alpha: float = Field(default=1.0, gt=0.0, description="Per-iteration step size in pixel units")
    iterations: int = Field(default=5, ge=1, description="Number of iterations T")
    beta: Optional[float] = Field(default=None, ge=0.0, description="CE weight; defaults per method")
    n_mix: int = Field(default=10, ge=2, description="Number of source images in the virtual sample")
    momentum: Optional[bool] = Field(default=None, description="Momentum accumulation; on for mixup/mixcut")
    scale_copies: int = Field(default=3, ge=1, description="Scale augmentation copies m")
    scale_augmentation: Optional[bool] = Field(default=None, description="On for mixup/mixcut")
    mu: float = Field(default=1.0, ge=0.0, description="C&W weight on the classification loss")
    include_mix: bool = Field(default=True, description="Ablation toggle for the mix loss term")
    include_ce: bool = Field(default=True, description="Ablation toggle for the cross-entropy term")
    resample_virtual: bool = Field(default=False, description="Rebuild the virtual sample per attacked image")
    tile: int = Field(default=512, ge=8, description="Segmentation images larger than this are attacked per tile")
    tile_overlap: int = Field(default=64, ge=0, description="Overlap between segmentation tiles")
    mask_background: bool = Field(default=True, description="Exclude invalid pixels from segmentation CE")
    seed: int = Field(default=42, description="Seed for virtual sample selection")

    @model_validator(mode="after")
    def _check(self):
        if not self.include_mix and not self.include_ce:
            raise ValueError("at least one of include_mix / include_ce must be set")
        if self.tile <= self.tile_overlap:
            raise ValueError("tile must exceed tile_overlap")
        return self

    @property
    def resolved_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        return DEFAULT_BETAS.get(self.method.value, DEFAULT_BETAS["mixup"])

    @property
    def use_momentum(self) -> bool:
        return self.method.uses_virtual if self.momentum is None else self.momentum

    @property
    def use_scale_augmentation(self) -> bool:
        if self.scale_augmentation is None:
            return self.method.uses_virtual
        return self.scale_augmentation

    @property
    def budget(self) -> float:
        """l-inf bound on the perturbation this config can produce."""
        if self.method.single_step:
            return self.epsilon
        return self.iterations * self.alpha

    def loss_spec(self, task: Task) -> LossSpec:
        seg = task == Task.segmentation
        if self.include_mix and self.include_ce:
            kind = LossKind.total_seg if seg else LossKind.total
        elif self.include_mix:
            kind = LossKind.mix
        else:
            kind = LossKind.seg_ce if seg else LossKind.ce
        return LossSpec(kind=kind, beta=self.resolved_beta, mask_background=self.mask_background)


def make_attack_config(**kwargs) -> AttackConfig:
    """Build an AttackConfig, turning validation failures into ConfigurationError."""
    try:
        return AttackConfig(**{k: v for k, v in kwargs.items() if v is not None})
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e


class RegistryEntry(BaseModel):
    architecture: str = Field(description="toy_classifier | toy_segmenter")
    task: Task = Field(default=Task.classification)
    weights: Optional[str] = Field(default=None, description="Path to a flat binary weight file")
    feature_tap: Optional[str] = Field(default=None, description="Named layer; first pooling layer when unset")
    input_spec: Optional[InputSpec] = None
    seed: int = 0
    width: int = 8
    n_classes: int = 4


class ModelRegistry(BaseModel):
    models: dict[str, RegistryEntry] = Field(default_factory=dict)

    @classmethod
    def load(cls, path: Optional[os.PathLike]) -> "ModelRegistry":
        if path is None or not Path(path).exists():
            return cls()
        try:
            registry = cls.model_validate_json(Path(path).read_text())
        except ValidationError as e:
            raise ConfigurationError(f"invalid model registry {path}: {e}") from e
        base = Path(path).parent
        for entry in registry.models.values():
            if entry.weights and not Path(entry.weights).is_absolute():
                entry.weights = str(base / entry.weights)
        return registry


class Settings(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_registry: str = Field(default_factory=lambda: os.getenv("MIXATTACK_MODEL_REGISTRY", "registry.json"))
    log_level: str = Field(default_factory=lambda: os.getenv("MIXATTACK_LOG_LEVEL", "INFO"))


def get_settings() -> Settings:
    return Settings()


__all__: List[str] = [
    "AttackConfig",
    "AttackMethod",
    "DEFAULT_BETAS",
    "EPS_FLOOR",
    "InputSpec",
    "LossKind",
    "LossSpec",
    "ModelRegistry",
    "RegistryEntry",
    "Settings",
    "Task",
    "get_settings",
    "make_attack_config",
]

"""JSON run configurations for the config-driven commands.

Unknown keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .backbone import DESK_CHANNELS, VGG19_DEPTHS, BackboneConfig
from .losses import LossWeights
from .optim import AdamConfig
from .targets import GLOBAL_SCALE, LOCAL_SHIFT
from .tensor import UsageError

Manipulation = Literal["local-shift", "global-scale"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackboneSection(_Strict):
    block_channels: tuple[int, int, int, int, int] = DESK_CHANNELS
    convs_per_block: tuple[int, int, int, int, int] = VGG19_DEPTHS
    seed: int = 0

    def build(self) -> BackboneConfig:
        return BackboneConfig(self.block_channels, self.convs_per_block, self.seed)


class WeightsSection(_Strict):
    sal: float = Field(1e0, ge=0)
    feat: float = Field(1e-2, ge=0)
    tex: float = Field(2e-2, ge=0)
    adv: float = Field(1e-1, ge=0)

    def build(self) -> LossWeights:
        return LossWeights(self.sal, self.feat, self.tex, self.adv)


class PretrainConfig(_Strict):
    dataset: str
    steps: int = Field(ge=0)
    lr: float = Field(3e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    heldout_fraction: float = Field(0.25, gt=0, lt=1)
    oracle_sigma: float = Field(2.0, gt=0)
    seed: int = 0
    backbone: BackboneSection = BackboneSection()


class TrainConfig(_Strict):
    dataset: str
    saliency: str  # directory written by ``pretrain``
    steps: int = Field(ge=0)
    manipulation: Manipulation = LOCAL_SHIFT
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-3, gt=0)
    discriminator_lr: Optional[float] = Field(None, gt=0)
    weights: WeightsSection = WeightsSection()
    seed: int = 0
    report_every: int = Field(1, ge=1)
    eval_every: int = Field(0, ge=0)
    eval_images: int = Field(16, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    residual_blocks: int = Field(1, ge=1)
    trunk_channels: int = Field(64, ge=16)

    def adam(self) -> tuple[AdamConfig, AdamConfig]:
        return AdamConfig(lr=self.lr), AdamConfig(lr=self.discriminator_lr or self.lr)


class EvaluateConfig(_Strict):
    dataset: str
    run: str  # directory written by ``train``
    n_images: Optional[int] = Field(None, ge=0)
    split: Literal["train", "test"] = "test"
    manipulation: Optional[Manipulation] = None  # default: the run's manipulation
    seed: int = 0


class AblateConfig(TrainConfig):
    variants: dict[str, dict[Literal["sal", "feat", "tex", "adv"], float]] = Field(default_factory=dict)


class TargetSpecConfig(_Strict):
    kind: Manipulation
    k_sh: Optional[float] = None
    k_sc: Optional[float] = None
    mask_blur_sigma: Optional[float] = Field(None, ge=0)

    def checked(self) -> "TargetSpecConfig":
        if self.kind == LOCAL_SHIFT and self.k_sh is None:
            raise UsageError("local-shift target spec needs k_sh")
        if self.kind == GLOBAL_SCALE and (self.k_sc is None or self.k_sc <= 0):
            raise UsageError("global-scale target spec needs a positive k_sc")
        return self


def _format_error(exc: ValidationError, source: str) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return f"{source}: invalid configuration: " + "; ".join(parts)


def parse(model: type[BaseModel], data: dict, source: str = "config"):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise UsageError(_format_error(exc, source)) from None


def load(model: type[BaseModel], path) -> BaseModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: no such config file") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return parse(model, data, str(path))
